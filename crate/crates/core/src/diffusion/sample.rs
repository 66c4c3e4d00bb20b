use super::denoiser::DenoiserModel;
use super::image::ToyImage;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Descending timesteps visited by a sampler with `steps` denoising steps.
pub fn timestep_sequence(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    let t_max = schedule.steps();
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidConfig(format!("sampling steps must be in 1..={t_max}, got {steps}")));
    }
    let mut ts: Vec<usize> = (0..steps).map(|i| t_max - (i * t_max) / steps).collect();
    ts.dedup();
    Ok(ts)
}

/// Ancestral DDPM sampling for a batch of conditions, one image per row of
/// `conds`. Sample `i` draws its noise from `rng.split(i)`, so each image
/// depends only on its own condition.
pub fn sample_batch(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    conds: &Matrix,
    steps: usize,
    rng: &Rng,
) -> Result<Vec<ToyImage>> {
    sample_rows(model, schedule, conds, steps, (0..conds.rows()).map(|i| rng.split(i as u64)).collect())
}

/// [`sample_batch`] with an explicit noise stream per row.
pub fn sample_rows(
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    conds: &Matrix,
    steps: usize,
    mut rngs: Vec<Rng>,
) -> Result<Vec<ToyImage>> {
    let ts = timestep_sequence(schedule, steps)?;
    let n = conds.rows();
    if rngs.len() != n {
        return Err(Error::DimensionMismatch(format!("{} noise streams for {n} conditions", rngs.len())));
    }
    let len = model.config().image_len;
    let mut x = Matrix::from_rows(&rngs.iter_mut().map(|r| r.normal_vec(len)).collect::<Vec<_>>())
        .unwrap_or_else(|_| Matrix::zeros(0, len));
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let eps = model.predict_batch(&x, &vec![t; n], conds)?;
        let ab = schedule.alpha_bar(t);
        let ab_prev = schedule.alpha_bar(t_prev);
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for i in 0..n {
            let z = if t_prev > 0 { rngs[i].normal_vec(len) } else { vec![0.0; len] };
            let e = eps.row(i).to_vec();
            let row = x.row_mut(i);
            for j in 0..len {
                let x0 = (row[j] - (1.0 - ab).sqrt() * e[j]) / ab.sqrt();
                row[j] = c0 * x0 + ct * row[j] + sigma * z[j];
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t = {t}")));
        }
    }
    (0..n).map(|i| ToyImage::new(x.row(i).to_vec()).map(|im| im.clamped())).collect()
}

/// Single-image convenience wrapper over [`sample_batch`].
pub fn sample(model: &DenoiserModel, schedule: &NoiseSchedule, cond: &[f64], steps: usize, seed: u64) -> Result<ToyImage> {
    if cond.len() != model.config().cond_dim {
        return Err(Error::DimensionMismatch(format!(
            "condition has dimension {}, expected {}",
            cond.len(),
            model.config().cond_dim
        )));
    }
    Ok(sample_batch(model, schedule, &Matrix::row_vector(cond), steps, &Rng::new(seed))?.remove(0))
}
