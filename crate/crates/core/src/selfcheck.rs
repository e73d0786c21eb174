//! Built-in numerical self-checks: fast versions of the core correctness
//! properties, runnable from the CLI on any install. Each check reports
//! pass/fail with a one-line detail; the rendered report ends with a single
//! PASS or FAIL line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::check_tape_gradients;
use crate::layers::{self, RevInParams, RevInState};
use crate::model::{ModelConfig, PvClient, VariantFlags};
use crate::tensor::{Tape, Tensor};
use crate::training::checkpoint::Checkpoint;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn first_failure(&self) -> Option<&CheckOutcome> {
        self.outcomes.iter().find(|o| !o.passed)
    }

    /// Human-readable report; the last line is exactly `PASS` or `FAIL`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if o.passed { "ok" } else { "FAILED" },
                o.name,
                o.detail
            ));
        }
        if let Some(f) = self.first_failure() {
            out.push_str(&format!("first failing assertion: {}\n", f.name));
            out.push_str("FAIL\n");
        } else {
            out.push_str("PASS\n");
        }
        out
    }
}

fn toy_model(seed: u64) -> PvClient {
    let config = ModelConfig {
        l: 8,
        t: 2,
        c: 3,
        num_blocks: 1,
        d_model: 8,
        heads: 2,
        embed_dim: 8,
        target_channel: 0,
        radiation_channel: 1,
    };
    PvClient::new(config, VariantFlags::default(), seed).expect("toy model")
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Finite-difference check of the full toy model over every parameter.
fn check_model_gradients(seed: u64) -> CheckOutcome {
    let model = toy_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let h = random_input(&mut rng, model.config.l, model.config.c);
    let target: Vec<f64> = (0..model.config.t).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let mut params: Vec<(String, Tensor)> = model
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let base = model.clone();
    let report = check_tape_gradients(
        &mut params,
        |ps| {
            let mut m = base.clone();
            for ((_, dst), (_, src)) in m.named_params_mut().into_iter().zip(ps) {
                dst.data_mut().copy_from_slice(src.data());
            }
            let mut tape = Tape::new();
            let fp = m.forward_on_tape(&mut tape, &h).unwrap();
            let loss = crate::training::mse_loss(&mut tape, fp.output, &target).unwrap();
            let ids = fp.named.iter().map(|(_, id)| *id).collect();
            (tape, loss, ids)
        },
        crate::gradcheck::DEFAULT_STEP,
        1e-4,
    );
    CheckOutcome {
        name: "model gradients vs finite differences",
        passed: report.ok(),
        detail: format!(
            "{} entries checked, max relative error {:.2e}",
            report.checked, report.max_rel_error
        ),
    }
}

/// A checker that cannot fail proves nothing, so verify it both accepts a
/// correct gradient and rejects a corrupted one.
fn check_detects_injected_sign_error() -> CheckOutcome {
    let clean_builder = |ps: &[(String, Tensor)], sign: f64| {
        let mut tape = Tape::new();
        let p = tape.leaf(&ps[0].1);
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, sign);
        (tape, loss, vec![p])
    };

    let mut params = vec![("p".to_string(), Tensor::vector(vec![0.4, -0.7]).with_grad())];
    let clean = check_tape_gradients(
        &mut params,
        |ps| clean_builder(ps, 1.0),
        crate::gradcheck::DEFAULT_STEP,
        1e-4,
    );

    // Flipping the loss sign between re-evaluations makes the analytic
    // gradient (from the first build) disagree with every finite
    // difference — indistinguishable from a sign error in a backward rule.
    let mut params2 = vec![("p".to_string(), Tensor::vector(vec![0.4, -0.7]).with_grad())];
    let mut sign = 1.0;
    let broken = check_tape_gradients(
        &mut params2,
        |ps| {
            sign = -sign;
            clean_builder(ps, sign)
        },
        crate::gradcheck::DEFAULT_STEP,
        1e-4,
    );
    CheckOutcome {
        name: "gradient checker detects an injected error",
        passed: clean.ok() && !broken.ok(),
        detail: format!(
            "clean case ok={}, corrupted case flagged {} mismatches",
            clean.ok(),
            broken.mismatches.len()
        ),
    }
}

fn check_revin_round_trip(seed: u64, instances: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..instances {
        let channels = 6;
        let mut params = RevInParams::new(channels);
        for a in params.alpha.data_mut() {
            *a = rng.gen_range(0.5..2.0);
        }
        for b in params.beta.data_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        let h = random_input(&mut rng, 192, channels);
        let mut tape = Tape::new();
        let h_id = tape.constant(&h);
        let bound = params.bind(&mut tape);
        let mut state = RevInState::new();
        let o = layers::revin_normalize(&mut tape, h_id, &bound, params.eps, &mut state).unwrap();
        let map: Vec<usize> = (0..channels).collect();
        let back = layers::revin_denormalize(&mut tape, o, &bound, &state, &map).unwrap();
        for (a, b) in tape.value(back).iter().zip(h.data()) {
            max_err = max_err.max((a - b).abs());
        }
    }
    CheckOutcome {
        name: "instance normalization round trip",
        passed: max_err < 1e-6,
        detail: format!("max |denorm(norm(H)) − H| = {max_err:.2e} over {instances} instances"),
    }
}

fn check_attention_stochasticity(seed: u64, passes: usize) -> CheckOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    for i in 0..passes {
        let model = toy_model(seed.wrapping_add(i as u64));
        let h = random_input(&mut rng, model.config.l, model.config.c);
        let mut tape = Tape::new();
        let fp = model.forward_on_tape(&mut tape, &h).unwrap();
        for block in &fp.attention {
            for &attn in block {
                let shape = tape.shape(attn).to_vec();
                let v = tape.value(attn);
                for r in 0..shape[0] {
                    let sum: f64 = v[r * shape[1]..(r + 1) * shape[1]].iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                    rows += 1;
                }
            }
        }
    }
    CheckOutcome {
        name: "attention rows sum to one",
        passed: worst < 1e-12,
        detail: format!("max |row sum − 1| = {worst:.2e} over {rows} rows"),
    }
}

fn check_permutation_equivariance(seed: u64) -> CheckOutcome {
    // Fresh init keeps the per-channel normalization affine at identity
    // (gain one, shift zero), which the equivariance claim requires.
    let model = toy_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let h = random_input(&mut rng, model.config.l, model.config.c);
    let c = model.config.c;
    // Rotate the non-target channels.
    let mut perm: Vec<usize> = vec![0];
    perm.extend((1..c).map(|i| 1 + (i % (c - 1))));
    let mut permuted = vec![0.0; h.numel()];
    for r in 0..model.config.l {
        for (new_col, &old_col) in perm.iter().enumerate() {
            permuted[r * c + new_col] = h.at(r, old_col);
        }
    }
    let hp = Tensor::matrix(model.config.l, c, permuted).unwrap();
    let a = model.predict(&h).unwrap();
    let b = model.predict(&hp).unwrap();
    let max_dev = a
        .final_forecast
        .data()
        .iter()
        .zip(b.final_forecast.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    CheckOutcome {
        name: "permutation equivariance of the target forecast",
        passed: max_dev < 1e-9,
        detail: format!("max |Δ forecast| = {max_dev:.2e} after permuting weather channels"),
    }
}

fn check_checkpoint_round_trip(seed: u64) -> CheckOutcome {
    let model = toy_model(seed);
    let st = crate::data::Standardizer::new_unfitted();
    let bytes = Checkpoint::from_model(&model, &st).to_bytes();
    let restored = match Checkpoint::from_bytes(&bytes).and_then(|c| c.build_model()) {
        Ok((m, _)) => m,
        Err(e) => {
            return CheckOutcome {
                name: "checkpoint round trip",
                passed: false,
                detail: format!("round trip failed: {e}"),
            }
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    let h = random_input(&mut rng, model.config.l, model.config.c);
    let a = model.predict(&h).unwrap();
    let b = restored.predict(&h).unwrap();
    let bitwise = a
        .final_forecast
        .data()
        .iter()
        .zip(b.final_forecast.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let second = Checkpoint::from_model(&restored, &st).to_bytes();
    CheckOutcome {
        name: "checkpoint round trip",
        passed: bitwise && bytes == second,
        detail: format!(
            "forward bitwise-equal: {bitwise}; save→load→save byte-identical: {}",
            bytes == second
        ),
    }
}

/// Runs the whole suite; intended to finish in seconds.
pub fn run_selfcheck(seed: u64) -> SelfCheckReport {
    SelfCheckReport {
        outcomes: vec![
            check_model_gradients(seed),
            check_detects_injected_sign_error(),
            check_revin_round_trip(seed, 100),
            check_attention_stochasticity(seed, 20),
            check_permutation_equivariance(seed),
            check_checkpoint_round_trip(seed),
        ],
    }
}
