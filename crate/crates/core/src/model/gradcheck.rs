//! End-to-end gradient verification: the full training loss (growth steps,
//! attention, update network, three loss terms, variant averaging) with
//! frozen stochastic masks, differentiated analytically and by central
//! finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::{ampute_mcar, corrupt, zero_fill, CorruptionSet, Mask};
use crate::matrix::Matrix;

use super::{draw_step_masks, grow_on_tape, losses, ModelError, NicaConfig, NicaModel, StepMasks};

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub rows: usize,
    pub feature_dim: usize,
    pub growth_steps: usize,
    pub variants: usize,
    pub seed: u64,
    /// Finite-difference step.
    pub step: f64,
    /// Pass threshold on the max relative error.
    pub threshold: f64,
    /// Negative-control hook: deliberately mis-scale one analytic gradient so
    /// the check must fail.
    pub corrupt_backward: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            rows: 6,
            feature_dim: 4,
            growth_steps: 2,
            variants: 2,
            seed: 7,
            step: 1e-5,
            threshold: 1e-4,
            corrupt_backward: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub parameters: usize,
    pub threshold: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

struct Fixture {
    model: NicaModel<f64>,
    reference: Matrix<f64>,
    observed: Mask,
    corruption: CorruptionSet<f64>,
    step_masks: Vec<Vec<StepMasks<f64>>>,
    cfg: NicaConfig,
}

/// Mean total loss over the variants, as a pure function of the parameters
/// (all stochastic masks are frozen in the fixture).
fn loss_value(fx: &Fixture, model: &NicaModel<f64>) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for v in 0..fx.cfg.variants {
        let mut tape = Tape::new(0);
        let x0 = tape.constant(fx.corruption.variants[v].clone());
        let params = model.register(&mut tape);
        let (grown, _) = grow_on_tape(&mut tape, x0, &params, &fx.step_masks[v])?;
        let nodes = losses(
            &mut tape,
            grown,
            &fx.reference,
            &fx.observed,
            &fx.corruption.masks[v],
            fx.cfg.alpha_recovering,
            fx.cfg.alpha_observed,
        )?;
        total += tape.value(nodes.total).get(0, 0);
    }
    Ok(total / fx.cfg.variants as f64)
}

fn analytic_grads(fx: &Fixture) -> Result<super::ModelGrads<f64>, ModelError> {
    let mut grads = super::ModelGrads {
        w1: Matrix::zeros(fx.model.w1.rows(), fx.model.w1.cols()),
        b1: Matrix::zeros(fx.model.b1.rows(), fx.model.b1.cols()),
        w2: Matrix::zeros(fx.model.w2.rows(), fx.model.w2.cols()),
        b2: Matrix::zeros(fx.model.b2.rows(), fx.model.b2.cols()),
    };
    let scale = 1.0 / fx.cfg.variants as f64;
    for v in 0..fx.cfg.variants {
        let mut tape = Tape::new(0);
        let x0 = tape.constant(fx.corruption.variants[v].clone());
        let params = fx.model.register(&mut tape);
        let (grown, _) = grow_on_tape(&mut tape, x0, &params, &fx.step_masks[v])?;
        let nodes = losses(
            &mut tape,
            grown,
            &fx.reference,
            &fx.observed,
            &fx.corruption.masks[v],
            fx.cfg.alpha_recovering,
            fx.cfg.alpha_observed,
        )?;
        tape.backward(nodes.total)?;
        for (dst, id) in [
            (&mut grads.w1, params.w1),
            (&mut grads.b1, params.b1),
            (&mut grads.w2, params.w2),
            (&mut grads.b2, params.b2),
        ] {
            if let Some(g) = tape.grad(id) {
                for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += scale * s;
                }
            }
        }
    }
    Ok(grads)
}

fn build_fixture(opts: &GradcheckOptions) -> Result<Fixture, ModelError> {
    let cfg = NicaConfig {
        growth_steps: opts.growth_steps,
        variants: opts.variants,
        seed: opts.seed,
        ..NicaConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (n, d) = (opts.rows, opts.feature_dim);

    let values = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect());
    let observed = ampute_mcar(&Mask::filled(n, d, true), 0.3, &mut rng)?;
    let reference = zero_fill(&values, &observed);
    let corruption = corrupt(&reference, &observed, cfg.corruption_rate, cfg.variants, &mut rng)?;

    // Random parameters everywhere: a zero update head would hide bugs in the
    // first-layer backward rules.
    let mut model = NicaModel::init(d, cfg.clone(), &mut rng);
    for m in [&mut model.w2, &mut model.b1, &mut model.b2] {
        for v in m.data_mut() {
            *v = rng.random_range(-0.3..0.3);
        }
    }

    let hidden = model.hidden_dim();
    let step_masks = (0..cfg.variants)
        .map(|_| draw_step_masks(n, hidden, &cfg, true, &mut rng, cfg.growth_steps))
        .collect();

    Ok(Fixture { model, reference, observed, corruption, step_masks, cfg })
}

/// Compare analytic gradients of the full training loss against central
/// finite differences for every parameter, with the stochastic masks frozen.
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport, ModelError> {
    let fx = build_fixture(opts)?;
    let mut analytic = analytic_grads(&fx)?;
    if opts.corrupt_backward {
        for v in analytic.w1.data_mut() {
            *v *= 1.01;
        }
    }

    let h = opts.step;
    let mut max_rel_err: f64 = 0.0;
    let mut parameters = 0usize;

    fn tensor_of(model: &mut NicaModel<f64>, which: usize) -> &mut Matrix<f64> {
        match which {
            0 => &mut model.w1,
            1 => &mut model.b1,
            2 => &mut model.w2,
            _ => &mut model.b2,
        }
    }
    fn analytic_of(grads: &super::ModelGrads<f64>, which: usize) -> &Matrix<f64> {
        match which {
            0 => &grads.w1,
            1 => &grads.b1,
            2 => &grads.w2,
            _ => &grads.b2,
        }
    }

    let mut probe = fx.model.clone();
    for which in 0..4 {
        let len = analytic_of(&analytic, which).data().len();
        for i in 0..len {
            let original = tensor_of(&mut probe, which).data()[i];
            tensor_of(&mut probe, which).data_mut()[i] = original + h;
            let up = loss_value(&fx, &probe)?;
            tensor_of(&mut probe, which).data_mut()[i] = original - h;
            let down = loss_value(&fx, &probe)?;
            tensor_of(&mut probe, which).data_mut()[i] = original;

            let fd = (up - down) / (2.0 * h);
            let an = analytic_of(&analytic, which).data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(rel);
            parameters += 1;
        }
    }

    Ok(GradcheckReport { max_rel_err, parameters, threshold: opts.threshold })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let report = gradcheck(&GradcheckOptions::default()).unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-4);
        assert_eq!(report.parameters, 8 * 20 + 20 + 20 * 4 + 4);
    }

    #[test]
    fn corrupted_backward_rule_is_detected() {
        let opts = GradcheckOptions { corrupt_backward: true, ..Default::default() };
        let report = gradcheck(&opts).unwrap();
        assert!(!report.passed(), "corruption went undetected: {}", report.max_rel_err);
    }

    #[test]
    fn report_is_deterministic_per_seed() {
        let a = gradcheck(&GradcheckOptions::default()).unwrap();
        let b = gradcheck(&GradcheckOptions::default()).unwrap();
        assert_eq!(a.max_rel_err.to_bits(), b.max_rel_err.to_bits());
    }
}
