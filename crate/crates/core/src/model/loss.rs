use crate::error::{LabError, Result};

use super::ActivationTensor;

/// Mean token cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &ActivationTensor, targets: &[usize]) -> Result<(f64, ActivationTensor)> {
    let m = logits.as_matrix();
    let (n, v) = m.shape();
    if targets.len() != n {
        return Err(LabError::Dimension(format!("{} targets for {n} positions", targets.len())));
    }
    let mut grad = m.clone();
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (r, &target) in targets.iter().enumerate() {
        if target >= v {
            return Err(LabError::Data(format!("target {target} out of range for vocab {v}")));
        }
        let row = grad.row_mut(r);
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            z += *x;
        }
        let lse = mx + z.ln();
        loss += lse - m[(r, target)];
        for x in row.iter_mut() {
            *x *= inv_n / z;
        }
        row[target] -= inv_n;
    }
    Ok((loss * inv_n, ActivationTensor::from_matrix(logits.batch(), logits.tokens(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let l = ActivationTensor::from_vec(1, 2, 32, vec![0.7; 64]).unwrap();
        let (loss, g) = cross_entropy(&l, &[3, 31]).unwrap();
        assert!((loss - 32f64.ln()).abs() < 1e-12);
        assert!((loss - 3.4657).abs() < 1e-4);
        for r in 0..2 {
            assert!(g.as_matrix().row(r).iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn confident_prediction_approaches_zero() {
        let mut last = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 50.0] {
            let mut v = vec![0.0; 4];
            v[2] = margin;
            let l = ActivationTensor::from_vec(1, 1, 4, v).unwrap();
            let (loss, _) = cross_entropy(&l, &[2]).unwrap();
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-20);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let vals = vec![0.3, -1.2, 2.0, 0.1, 0.5, 0.5, -0.4, 1.7];
        let l = ActivationTensor::from_vec(1, 2, 4, vals.clone()).unwrap();
        let t = [2, 0];
        let (_, g) = cross_entropy(&l, &t).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            let mut p = vals.clone();
            p[i] += h;
            let mut q = vals.clone();
            q[i] -= h;
            let lp = cross_entropy(&ActivationTensor::from_vec(1, 2, 4, p).unwrap(), &t).unwrap().0;
            let lq = cross_entropy(&ActivationTensor::from_vec(1, 2, 4, q).unwrap(), &t).unwrap().0;
            assert!(((lp - lq) / (2.0 * h) - g.data()[i]).abs() < 1e-8);
        }
    }
}
