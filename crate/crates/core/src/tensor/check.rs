use super::{NodeId, Result, Tape, Tensor};

/// Central finite-difference gradient of a scalar tape function.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).item())
    };
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }
    Ok(grad)
}

/// Maximum over coordinates of `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    tape.backward(out)?;
    let analytic = tape.grad(leaf).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-8))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.5, -1.5, 2.0, 0.25]);
        let x = Tensor::vector(vec![1.0, 2.0, -3.0, 0.5]);
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                t.matmul(w, x)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn sigmoid_of_dot() {
        let w = Tensor::vector((0..8).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect());
        let x = Tensor::vector((0..8).map(|i| ((i * 53 % 13) as f64 - 6.0) / 9.0).collect());
        let err = grad_check(
            |t, x| {
                let w = t.constant(w.clone());
                let d = t.matmul(w, x)?;
                t.sigmoid(d)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |t: &mut Tape, x: NodeId| {
            let z = t.scale(x, 0.0)?;
            let s = t.sum(z)?;
            let c = t.constant(Tensor::scalar(3.0));
            let c = t.apply(super::super::Op::Add, &[s, c])?;
            Ok(c)
        };
        let num = numeric_gradient(&f, &x, 1e-3).unwrap();
        assert!(num.data().iter().all(|&v| v == 0.0));
        assert_eq!(grad_check(f, &x, 1e-3).unwrap(), 0.0);
    }
}
