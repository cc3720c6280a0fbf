use super::{DenoiserParams, Mode, NormState};
use crate::error::{Error, Result};

/// Replace every batch-norm layer by the per-channel affine map it applies
/// with its running statistics: `scale = gamma / sqrt(var + eps)`,
/// `shift = beta - scale * mean`.
pub fn fold_batchnorm(params: &DenoiserParams) -> Result<DenoiserParams> {
    if params.mode == Mode::Eval {
        return Err(Error::State("parameters are already folded".into()));
    }
    let mut folded = params.clone();
    for (i, layer) in folded.layers.iter_mut().enumerate() {
        let cout = layer.spec.out_channels;
        let norm = match layer.norm.take() {
            None => None,
            Some(NormState::Batch {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                ..
            }) => {
                let complete = [&gamma, &beta, &running_mean, &running_var]
                    .iter()
                    .all(|v| v.len() == cout && v.iter().all(|x| x.is_finite()))
                    && running_var.iter().all(|v| *v >= 0.0);
                if !complete {
                    return Err(Error::State(format!(
                        "layer {i} is missing valid running statistics"
                    )));
                }
                let scale: Vec<f64> = gamma
                    .iter()
                    .zip(&running_var)
                    .map(|(g, v)| g / (v + eps).sqrt())
                    .collect();
                let shift = beta
                    .iter()
                    .zip(&running_mean)
                    .zip(&scale)
                    .map(|((b, m), s)| b - s * m)
                    .collect();
                Some(NormState::Affine { scale, shift })
            }
            Some(NormState::Affine { .. }) => {
                return Err(Error::State(format!(
                    "layer {i} is already folded in a train-mode block"
                )))
            }
        };
        layer.norm = norm;
    }
    folded.mode = Mode::Eval;
    Ok(folded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockConfig, FeatureBatch};

    #[test]
    fn identity_statistics_fold_to_identity() {
        let p = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 0).unwrap();
        let f = fold_batchnorm(&p).unwrap();
        match &f.layers[1].norm {
            Some(NormState::Affine { scale, shift }) => {
                // gamma 1, beta 0, mean 0, var 1
                for s in scale {
                    assert!((s - 1.0 / (1.0 + crate::model::BN_EPS).sqrt()).abs() < 1e-15);
                }
                assert!(shift.iter().all(|v| *v == 0.0));
            }
            other => panic!("unexpected norm {other:?}"),
        }
        assert_eq!(f.mode, Mode::Eval);
        f.validate().unwrap();
    }

    #[test]
    fn folding_twice_fails() {
        let p = DenoiserParams::init(BlockConfig::temporal().with_width(4).with_depth(3), 0).unwrap();
        let f = fold_batchnorm(&p).unwrap();
        assert!(matches!(fold_batchnorm(&f), Err(Error::State(_))));
    }

    #[test]
    fn missing_statistics_fail() {
        let mut p = DenoiserParams::init(BlockConfig::spatial().with_width(4).with_depth(3), 0).unwrap();
        if let Some(NormState::Batch { running_var, .. }) = &mut p.layers[1].norm {
            running_var.clear();
        }
        assert!(matches!(fold_batchnorm(&p), Err(Error::State(_))));
    }

    #[test]
    fn folded_forward_matches_running_stat_forward() {
        let mut p = DenoiserParams::init(BlockConfig::spatial().with_width(8).with_depth(4), 9).unwrap();
        for (k, layer) in p.layers.iter_mut().enumerate() {
            if let Some(NormState::Batch { gamma, beta, running_mean, running_var, .. }) = &mut layer.norm {
                for ch in 0..gamma.len() {
                    let t = (k * 31 + ch * 7) as f64;
                    gamma[ch] = 0.5 + (t % 5.0) * 0.2;
                    beta[ch] = (t % 3.0) * 0.1 - 0.1;
                    running_mean[ch] = (t % 7.0) * 0.05;
                    running_var[ch] = 0.3 + (t % 4.0) * 0.4;
                }
            }
        }
        let f = fold_batchnorm(&p).unwrap();
        let input = FeatureBatch {
            n: 2,
            h: 4,
            w: 4,
            c: 13,
            data: (0..2 * 16 * 13).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
        };
        let a = p.infer(&input).unwrap();
        let b = f.infer(&input).unwrap();
        let max = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max < 1e-12, "max abs diff {max}");
    }
}
