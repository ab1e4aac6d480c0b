use rayon::prelude::*;

use super::batch::{BatchMeta, SamplerKind, TrajectoryBatch};
use super::grid::AlphaSchedule;
use super::{normal, substream};
use crate::diffusion::{DiffusionModel, ScoreModel};
use crate::error::{Error, Result};

fn check_order(alpha_now: f64, alpha_prev: f64) -> Result<()> {
    if alpha_now > 0.0 && alpha_now <= alpha_prev && alpha_prev <= 1.0 {
        Ok(())
    } else {
        Err(Error::ScheduleOrder {
            now: alpha_now,
            prev: alpha_prev,
        })
    }
}

/// Variance of the noise injected when stepping from `alpha_now` to the
/// earlier, larger `alpha_prev`:
/// `(1 - a_prev) * (1 - ((1 - a_prev) / (1 - a_now))^{eta^2} * (a_now / a_prev)^{eta^2})`.
pub fn gddim_sigma_sq(alpha_now: f64, alpha_prev: f64, eta: f64) -> Result<f64> {
    check_order(alpha_now, alpha_prev)?;
    if !(eta.is_finite() && eta >= 0.0) {
        return Err(Error::InvalidArgument(format!("eta must be nonnegative, got {eta}")));
    }
    if alpha_now == alpha_prev || alpha_prev == 1.0 {
        return Ok(0.0);
    }
    let cap = 1.0 - alpha_prev;
    let ratio = (cap / (1.0 - alpha_now)) * (alpha_now / alpha_prev);
    let sigma_sq = cap * (1.0 - ratio.powf(eta * eta));
    Ok(sigma_sq.clamp(0.0, cap))
}

/// Deterministic coefficients of one step: `x' = scale x + eps s + sigma z`.
#[derive(Debug, Clone, Copy)]
struct StepCoefficients {
    scale: f64,
    eps: f64,
    sigma: f64,
}

fn step_coefficients(alpha_now: f64, alpha_prev: f64, eta: f64) -> Result<StepCoefficients> {
    let sigma_sq = gddim_sigma_sq(alpha_now, alpha_prev, eta)?;
    if alpha_now == alpha_prev {
        return Ok(StepCoefficients {
            scale: 1.0,
            eps: 0.0,
            sigma: 0.0,
        });
    }
    let rest = 1.0 - alpha_prev - sigma_sq;
    if rest < 0.0 {
        return Err(Error::ScheduleInconsistency(rest));
    }
    let scale = (alpha_prev / alpha_now).sqrt();
    Ok(StepCoefficients {
        scale,
        eps: scale * (1.0 - alpha_now) - (rest * (1.0 - alpha_now)).sqrt(),
        sigma: sigma_sq.sqrt(),
    })
}

/// One gDDIM update from signal level `alpha_now` back to `alpha_prev`, given
/// the score at the current state and a standard normal draw.
pub fn gddim_step(
    x: &[f64],
    alpha_now: f64,
    alpha_prev: f64,
    eta: f64,
    score_value: &[f64],
    noise: &[f64],
) -> Result<Vec<f64>> {
    if score_value.len() != x.len() || noise.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: if score_value.len() != x.len() {
                score_value.len()
            } else {
                noise.len()
            },
        });
    }
    let c = step_coefficients(alpha_now, alpha_prev, eta)?;
    Ok(x.iter()
        .zip(score_value)
        .zip(noise)
        .map(|((x, s), z)| c.scale * x + c.eps * s + c.sigma * z)
        .collect())
}

/// Runs the chain from the last schedule index down to 0, starting from
/// `N(0, I)`. Scores are evaluated with the VP model at forward time
/// `sqrt(-ln alpha)`, where its marginals have signal level `alpha`.
pub fn gddim_sample(
    schedule: &AlphaSchedule,
    score: &ScoreModel,
    eta: f64,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    if n == 0 {
        return Err(Error::EmptyInput("trajectory count"));
    }
    let dim = score.dim().unwrap_or(1);
    let alphas = schedule.alphas();
    let steps = alphas.len() - 1;
    let tau_max = (-alphas[steps].ln()).sqrt().max(f64::MIN_POSITIVE);
    let model = DiffusionModel::vp(tau_max, dim)?;

    // Step k maps index k + 1 to k.
    let coeffs = (0..steps)
        .map(|k| step_coefficients(alphas[k + 1], alphas[k], eta))
        .collect::<Result<Vec<_>>>()?;
    let taus: Vec<f64> = (0..steps).map(|k| (-alphas[k + 1].ln()).max(0.0).sqrt()).collect();

    // Affine scores collapse to `x' = m x + c + sigma z` per coordinate.
    let mut affine: Option<(Vec<f64>, Vec<f64>)> = Some((Vec::new(), Vec::new()));
    let (mut p, mut q) = (vec![0.0; dim], vec![0.0; dim]);
    for k in 0..steps {
        if !score.affine_form(&model, taus[k], &mut p, &mut q)? {
            affine = None;
            break;
        }
        let (m, c) = affine.as_mut().expect("still affine");
        let st = coeffs[k];
        for j in 0..dim {
            m.push(st.scale - st.eps * p[j]);
            c.push(st.eps * q[j]);
        }
    }

    let simulate = |i: usize, buf: &mut (Vec<f64>, Vec<f64>), out: &mut [f64]| -> Result<()> {
        let (x, s) = buf;
        let mut rng = substream(seed, i as u64);
        for v in x.iter_mut() {
            *v = normal(&mut rng);
        }
        for k in (0..steps).rev() {
            let st = coeffs[k];
            match &affine {
                Some((m, c)) => {
                    for j in 0..dim {
                        x[j] = m[k * dim + j] * x[j] + c[k * dim + j];
                    }
                }
                None => {
                    score.eval(&model, taus[k], x, s)?;
                    for j in 0..dim {
                        x[j] = st.scale * x[j] + st.eps * s[j];
                    }
                }
            }
            if st.sigma != 0.0 {
                for v in x.iter_mut() {
                    *v += st.sigma * normal(&mut rng);
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step: steps - 1 - k,
                    trajectory: i,
                });
            }
        }
        out.copy_from_slice(x);
        Ok(())
    };

    let mut terminal = vec![0.0; n * dim];
    let first_error = terminal
        .par_chunks_mut(dim)
        .enumerate()
        .map_init(
            || (vec![0.0; dim], vec![0.0; dim]),
            |buf, (i, out)| simulate(i, buf, out).err().map(|e| (i, e)),
        )
        .flatten()
        .min_by_key(|(i, _)| *i);
    if let Some((_, e)) = first_error {
        return Err(e);
    }
    let meta = BatchMeta {
        model: "vp".into(),
        sampler: SamplerKind::Gddim,
        eta,
        seed,
        grid: schedule.grid().clone(),
    };
    TrajectoryBatch::new(meta, n, dim, terminal, None)
}
