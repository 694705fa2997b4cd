//! Differentiable loss terms. Every function accepts `f32` or `f64` tensors;
//! teacher-side arguments are detached internally.
//!
//! Tensors of rank ≤ 2 are treated as one sample; higher ranks carry the
//! batch on dimension 0.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::ops::safe_sqrt;

/// Smoothing constant of the soft Dice score.
pub const DICE_EPS: f64 = 1.0;
/// Variance below which a Pearson correlation is left out of the DIST means.
pub const DIST_MIN_VARIANCE: f64 = 1e-12;

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Reshapes to `(batch, elements)`.
fn per_sample(t: &Tensor) -> Result<Tensor> {
    Ok(if t.rank() <= 2 {
        t.flatten_all()?.unsqueeze(0)?
    } else {
        t.flatten_from(1)?
    })
}

/// Per-sample `‖f_s − f_t‖_F / √E`, averaged over the batch.
pub fn pairwise_distance_loss(f_s: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    same_shape(f_s, f_t, "pairwise distance")?;
    let diff = per_sample(&(f_s - f_t.detach())?)?;
    Ok(safe_sqrt(&diff.sqr()?.mean(1)?)?.mean_all()?)
}

/// Soft Dice `(2Σpt + ε) / (Σp + Σt + ε)`, averaged over the batch.
pub fn dice_score(p: &Tensor, t: &Tensor) -> Result<Tensor> {
    same_shape(p, t, "dice")?;
    let p = per_sample(p)?;
    let t = per_sample(&t.to_dtype(p.dtype())?)?;
    let inter = (&p * &t)?.sum(1)?;
    let num = ((inter * 2.0)? + DICE_EPS)?;
    let den = ((p.sum(1)? + t.sum(1)?)? + DICE_EPS)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 − dice_score(σ(logits), mask)`.
pub fn dice_loss(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?;
    Ok(dice_score(&p, mask)?.affine(-1.0, 1.0)?)
}

/// Numerically stable `log(1 + eˣ)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// `T²` × mean per-pixel KL(σ(t/T) ‖ σ(s/T)) between Bernoulli distributions.
pub fn nkd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    same_shape(student, teacher, "nkd")?;
    check_temperature(temperature)?;
    let a = (teacher.detach() / temperature)?;
    let b = (student / temperature)?;
    let p = candle_nn::ops::sigmoid(&a)?;
    // p(a − b) + softplus(b) − softplus(a)
    let kl = ((p * (&a - &b)?)? + (softplus(&b)? - softplus(&a)?)?)?;
    Ok((kl.mean_all()? * (temperature * temperature))?)
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Config(format!("temperature {t} must be positive")));
    }
    Ok(())
}

fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let z = x.broadcast_sub(&m)?;
    let lse = z.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(z.broadcast_sub(&lse)?)
}

/// Channel-wise distillation: per channel, a softmax over all spatial
/// positions at temperature `T`; `T²` × KL(teacher ‖ student) averaged over
/// channels (and batch).
pub fn cwd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> Result<Tensor> {
    same_shape(student, teacher, "cwd")?;
    check_temperature(temperature)?;
    if student.rank() < 2 {
        return Err(Error::Shape(format!("cwd needs spatial maps, got {:?}", student.dims())));
    }
    let dims = student.dims();
    let spatial = dims[dims.len() - 2] * dims[dims.len() - 1];
    let rows = student.elem_count() / spatial;
    let ls = log_softmax_rows(&(student / temperature)?.reshape((rows, spatial))?)?;
    let lt = log_softmax_rows(&(teacher.detach() / temperature)?.reshape((rows, spatial))?)?;
    let kl = (lt.exp()? * (&lt - ls)?)?.sum(1)?;
    Ok((kl.mean_all()? * (temperature * temperature))?)
}

/// Mean Pearson correlation between matching rows of `s` and `t`
/// (shape `(rows, len)`), skipping rows where either side is flat.
/// Returns `None` when every row is flat.
fn mean_row_correlation(s: &Tensor, t: &Tensor) -> Result<Option<Tensor>> {
    let sc = s.broadcast_sub(&s.mean_keepdim(1)?)?;
    let tc = t.broadcast_sub(&t.mean_keepdim(1)?)?;
    let cov = (&sc * &tc)?.mean(1)?;
    let vs = sc.sqr()?.mean(1)?;
    let vt = tc.sqr()?.mean(1)?;
    let vs_host: Vec<f64> = vs.to_dtype(DType::F64)?.to_vec1()?;
    let vt_host: Vec<f64> = vt.to_dtype(DType::F64)?.to_vec1()?;
    let valid: Vec<f64> = vs_host
        .iter()
        .zip(&vt_host)
        .map(|(a, b)| if *a > DIST_MIN_VARIANCE && *b > DIST_MIN_VARIANCE { 1.0 } else { 0.0 })
        .collect();
    let count: f64 = valid.iter().sum();
    if count == 0.0 {
        return Ok(None);
    }
    let valid = Tensor::from_vec(valid, vs.dims(), s.device())?.to_dtype(s.dtype())?;
    let keep = valid.gt(0.5)?;
    let prod = (&vs * &vt)?;
    let denom = keep.where_cond(&prod, &prod.ones_like()?)?.sqrt()?;
    let corr = ((cov / denom)? * valid)?;
    Ok(Some((corr.sum_all()? / count)?))
}

/// `(1 − inter) + (1 − intra)`: inter is the mean Pearson correlation across
/// the batch at each spatial position, intra across positions within each
/// sample.
pub fn dist_loss(student: &Tensor, teacher: &Tensor) -> Result<Tensor> {
    same_shape(student, teacher, "dist")?;
    let s = per_sample(student)?;
    let t = per_sample(&teacher.detach())?;
    let zero = Tensor::zeros((), s.dtype(), s.device())?;
    let term = |c: Option<Tensor>| -> Result<Tensor> {
        Ok(match c {
            Some(c) => c.affine(-1.0, 1.0)?,
            None => zero.clone(),
        })
    };
    let inter = term(mean_row_correlation(&s.t()?.contiguous()?, &t.t()?.contiguous()?)?)?;
    let intra = term(mean_row_correlation(&s, &t)?)?;
    Ok((inter + intra)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn pairwise_distance_examples() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(scalar(pairwise_distance_loss(&a, &a).unwrap()), 0.0);
        let b = (&a + 3.0).unwrap();
        assert!((scalar(pairwise_distance_loss(&b, &a).unwrap()) - 3.0).abs() < 1e-12);
        assert!(pairwise_distance_loss(&a, &t(&[1.0], &[1])).is_err());
    }

    fn block(y0: usize, x0: usize) -> Tensor {
        let mut v = vec![0.0; 16];
        for y in y0..y0 + 2 {
            for x in x0..x0 + 2 {
                v[y * 4 + x] = 1.0;
            }
        }
        t(&v, &[4, 4])
    }

    #[test]
    fn dice_examples() {
        let ones = t(&[1.0; 16], &[4, 4]);
        assert!((scalar(dice_score(&ones, &ones).unwrap()) - 1.0).abs() < 1e-12);
        let zeros = t(&[0.0; 16], &[4, 4]);
        assert!((scalar(dice_score(&zeros, &zeros).unwrap()) - 1.0).abs() < 1e-12);
        let d = scalar(dice_score(&block(0, 0), &block(0, 1)).unwrap());
        assert!((d - 5.0 / 9.0).abs() < 1e-12);
        let l = scalar(dice_loss(&zeros, &ones).unwrap());
        assert!((l - 0.32).abs() < 1e-12);
    }

    #[test]
    fn dice_loss_vanishes_for_saturated_logits() {
        let mask = block(1, 1);
        let logits = mask.affine(200.0, -100.0).unwrap();
        assert!(scalar(dice_loss(&logits, &mask).unwrap()) < 1e-12);
    }

    #[test]
    fn nkd_matches_expanded_kl() {
        let s = t(&[0.3, -1.2, 2.0, 0.0], &[2, 2]);
        let tt = t(&[1.0, -0.5, -2.0, 0.7], &[2, 2]);
        let temp = 2.0;
        let sv: Vec<f64> = s.flatten_all().unwrap().to_vec1().unwrap();
        let tv: Vec<f64> = tt.flatten_all().unwrap().to_vec1().unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut acc = 0.0;
        for (a, b) in tv.iter().zip(&sv) {
            let (p, q) = (sig(a / temp), sig(b / temp));
            acc += p * (p / q).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
        }
        let want = temp * temp * acc / 4.0;
        assert!((scalar(nkd_loss(&s, &tt, temp).unwrap()) - want).abs() < 1e-12);
        assert!(scalar(nkd_loss(&s, &s, temp).unwrap()).abs() < 1e-12);
        assert!(nkd_loss(&s, &tt, 0.0).is_err());
    }

    #[test]
    fn cwd_matches_brute_force() {
        let s = t(&[0.1, 0.5, -0.3, 0.9], &[1, 2, 2]);
        let tt = t(&[1.0, -1.0, 0.2, 0.4], &[1, 2, 2]);
        let temp = 1.0;
        let sm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let ps = sm(&[0.1, 0.5, -0.3, 0.9]);
        let pt = sm(&[1.0, -1.0, 0.2, 0.4]);
        let want: f64 = pt.iter().zip(&ps).map(|(p, q)| p * (p / q).ln()).sum();
        assert!((scalar(cwd_loss(&s, &tt, temp).unwrap()) - want).abs() < 1e-12);
        let shifted = (&s + 5.0).unwrap();
        let shifted_t = (&tt + 5.0).unwrap();
        let a = scalar(cwd_loss(&shifted, &shifted_t, temp).unwrap());
        assert!((a - want).abs() < 1e-12);
        assert!(scalar(cwd_loss(&s, &s, 4.0).unwrap()).abs() < 1e-12);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn dist_matches_direct_pearson() {
        let sv: Vec<f64> = (0..18).map(|i| ((i * 7 % 11) as f64).sin()).collect();
        let tv: Vec<f64> = (0..18).map(|i| ((i * 5 % 13) as f64).cos()).collect();
        let s = t(&sv, &[2, 1, 3, 3]);
        let tt = t(&tv, &[2, 1, 3, 3]);
        let intra = (pearson(&sv[..9], &tv[..9]) + pearson(&sv[9..], &tv[9..])) / 2.0;
        let inter: f64 = (0..9).map(|j| pearson(&[sv[j], sv[9 + j]], &[tv[j], tv[9 + j]])).sum::<f64>() / 9.0;
        let want = (1.0 - inter) + (1.0 - intra);
        assert!((scalar(dist_loss(&s, &tt).unwrap()) - want).abs() < 1e-12);
        let affine = tt.affine(2.5, -1.0).unwrap();
        assert!(scalar(dist_loss(&affine, &tt).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn dist_skips_flat_rows() {
        // single sample: every position is flat across the batch
        let s = t(&[1.0, 2.0, 3.0, 5.0], &[1, 1, 2, 2]);
        assert!(scalar(dist_loss(&s, &s).unwrap()).abs() < 1e-12);
        let flat = t(&[1.0; 4], &[1, 1, 2, 2]);
        assert_eq!(scalar(dist_loss(&flat, &s).unwrap()), 0.0);
    }
}
