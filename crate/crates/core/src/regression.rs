//! Error regression of the inference SLV, closed-loop motion generation and
//! the success-rate evaluation suite.

use serde::{Deserialize, Serialize};

use crate::config::{ErConfig, EvalConfig};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::model::{Model, Policy};
use crate::sim::{demo_length, record, sample_scene, Arm, PositionMode, Sample, Split, Task};
use crate::slv::{trainable_partition, Phase};
use crate::tensor::{Graph, RAdam, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErRecord {
    pub iteration: usize,
    pub loss: f64,
    pub point: f64,
    pub language: f64,
    /// SLV at which this iteration's loss was evaluated.
    pub slv: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErTrace {
    pub instruction: String,
    pub records: Vec<ErRecord>,
    /// Loss at the SLV left by the last update.
    pub final_loss: f64,
    pub final_slv: Vec<f32>,
}

impl ErTrace {
    pub fn initial_loss(&self) -> f64 {
        self.records.first().map_or(f64::NAN, |r| r.loss)
    }
}

/// The first observation of an episode, in simulator units.
#[derive(Clone, Debug)]
pub struct Observation {
    pub image: Vec<f32>,
    pub mask_a: Vec<f32>,
    pub mask_b: Vec<f32>,
    pub joints: Vec<f32>,
}

impl Observation {
    pub fn of(sample: &Sample, model: &Model) -> Result<Self> {
        let f = record(&sample.scene, &sample.truth, model.cfg.model.image_size, &model.cfg.sim)?;
        Ok(Self { image: f.image, mask_a: f.masks.a, mask_b: f.masks.b, joints: f.joints.to_vec() })
    }
}

/// Optimizes a fresh zero inference SLV for `iterations` steps against the
/// initial-frame point error plus the sentence reconstruction loss. Only
/// the inference SLV in `model.store` is written.
pub fn regress_slv(model: &mut Model, norm: &Normalization, obs: &Observation, instruction: &str, cfg: &ErConfig) -> Result<(Vec<f32>, ErTrace)> {
    if cfg.iterations == 0 {
        return Err(Error::Regression("iterations must be at least 1".into()));
    }
    let tokens = model.vocab.encode(instruction)?;
    let dim = model.slv.dim;
    model.slv.set_inference(&mut model.store, &vec![0.0; dim])?;
    let part = trainable_partition(&model.store, Phase::Regression)?;

    // the perception stage does not depend on the SLV
    let (x0, p0) = {
        let n = model.cfg.model.image_size;
        let jd = model.core.joints;
        let raw: Vec<f32> = obs.joints.iter().copied().chain(std::iter::repeat(0.0)).take(jd).collect();
        let mut g: Graph<f32> = Graph::frozen(&model.store);
        let img = g.constant(Tensor::new(&[1, 3, n, n], norm.pixels(&obs.image))?);
        let ma = g.constant(Tensor::new(&[1, 3, n, n], obs.mask_a.clone())?);
        let mb = g.constant(Tensor::new(&[1, 3, n, n], obs.mask_b.clone())?);
        let jv = g.constant(Tensor::new(&[1, jd], norm.joints(&raw))?);
        let o = model.observe(&mut g, img, ma, mb, jv, None)?;
        (g.value(o.tokens).clone(), g.value(o.points).clone())
    };

    let mut opt = RAdam::new(cfg.optimizer, &model.store, &part.trainable);
    let mut records = Vec::with_capacity(cfg.iterations);
    for it in 0..=cfg.iterations {
        let (loss, point, language, mut grads) = {
            let mut g: Graph = Graph::new(&model.store, &part.trainable);
            let x = g.constant(x0.clone());
            let target = g.constant(p0.clone());
            let s = model.slv.inference(&mut g);
            let proj = model.slv.project(&mut g, s)?;
            let state = model.core.zero_state(&mut g, 1);
            let (h, _) = model.core.step(&mut g, x, &state, Some(&proj.lstm))?;
            let (p1, _) = model.core.heads(&mut g, h)?;
            let point = g.mse(p1, target)?;
            let language = model.lm.sentence_loss(&mut g, std::slice::from_ref(&tokens), Some(&proj.lm), 1.0)?;
            let loss = g.add(point, language)?;
            let values = (g.value(loss).item() as f64, g.value(point).item() as f64, g.value(language).item() as f64);
            let grads = if it < cfg.iterations { Some(g.param_grads(&g.backward(loss)?)) } else { None };
            (values.0, values.1, values.2, grads)
        };
        if !loss.is_finite() {
            return Err(Error::Regression(format!("non-finite loss at iteration {it}; trace so far: {records:?}")));
        }
        let slv = model.store.value(model.slv.inference).data().to_vec();
        match grads.as_mut() {
            Some(grads) => {
                records.push(ErRecord { iteration: it, loss, point, language, slv });
                opt.step(&mut model.store, grads)?;
            }
            None => {
                let trace = ErTrace { instruction: instruction.to_string(), records, final_loss: loss, final_slv: slv.clone() };
                return Ok((slv, trace));
            }
        }
    }
    unreachable!("the final iteration returns")
}

/// What one closed-loop step saw and predicted.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepCapture {
    pub joints: Vec<f32>,
    pub encoded_points: Vec<f32>,
    pub predicted_points: Vec<f32>,
    /// Top LSTM layer hidden state.
    pub hidden: Vec<f32>,
    /// Per transformer layer, `heads x 7 x 7` row-major.
    pub attention: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Rollout {
    pub task: Task,
    pub instruction: String,
    pub slv: Vec<f32>,
    /// Joint configuration after every tick, starting with the initial one.
    pub trajectory: Vec<Vec<f32>>,
    pub success: bool,
    pub steps: usize,
    pub captures: Vec<StepCapture>,
    /// Set when the simulator rejected a command.
    pub fault: Option<String>,
}

/// Runs the policy with a fixed `slv` until success or the task's timeout.
pub fn generate_motion(model: &Model, norm: &Normalization, sample: &Sample, slv: &[f32], timeout_factor: f32) -> Result<Rollout> {
    let sim = &model.cfg.sim;
    let arm = Arm::new(sim);
    let mut scene = sample.scene.clone();
    let mut policy = Policy::new(model, norm, slv)?;
    let limit = (timeout_factor * demo_length(sample.truth.task) as f32).ceil() as usize;
    let mut out = Rollout {
        task: sample.truth.task,
        instruction: sample.instruction.clone(),
        slv: slv.to_vec(),
        trajectory: vec![scene.joints.to_vec()],
        success: false,
        steps: 0,
        captures: Vec::new(),
        fault: None,
    };
    for _ in 0..limit {
        let frame = record(&scene, &sample.truth, model.cfg.model.image_size, sim)?;
        let step = policy.step(&frame.image, &frame.masks.a, &frame.masks.b, &frame.joints)?;
        out.captures.push(StepCapture {
            joints: frame.joints.to_vec(),
            encoded_points: step.encoded_points,
            predicted_points: step.predicted_points,
            hidden: step.hidden.last().cloned().unwrap_or_default(),
            attention: step.attention.iter().map(|t| t.data().to_vec()).collect(),
        });
        if let Err(e) = scene.step(&arm, sim, &step.joints[..5]) {
            out.fault = Some(e.to_string());
            break;
        }
        out.steps += 1;
        out.trajectory.push(scene.joints.to_vec());
        if scene.check_success(&sample.truth, sim) {
            out.success = true;
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LanguageMode {
    Seen,
    HeldOut,
}

impl LanguageMode {
    pub fn split(self) -> Split {
        match self {
            Self::Seen => Split::Train,
            Self::HeldOut => Split::HeldOut,
        }
    }
}

impl std::str::FromStr for LanguageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Self::Seen),
            "held_out" | "held-out" | "heldout" => Ok(Self::HeldOut),
            other => Err(Error::Config(format!("unknown language mode `{other}` (expected seen or held_out)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trial {
    pub task: Task,
    pub seed: u64,
    pub instruction: String,
    pub with_er: bool,
    pub success: bool,
    pub steps: usize,
    pub trace: Option<ErTrace>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub position: PositionMode,
    pub language: LanguageMode,
    pub with_er: bool,
    pub trials: Vec<Trial>,
}

impl SuiteResult {
    pub fn successes(&self, task: Task) -> (usize, usize) {
        let t: Vec<&Trial> = self.trials.iter().filter(|x| x.task == task).collect();
        (t.iter().filter(|x| x.success).count(), t.len())
    }

    pub fn rate(&self, task: Task) -> f64 {
        let (s, n) = self.successes(task);
        if n == 0 {
            0.0
        } else {
            s as f64 / n as f64
        }
    }
}

/// Scene seed of trial `i` for `task`; shared by both ER settings.
pub fn trial_seed(base: u64, task: Task, i: usize) -> u64 {
    base.wrapping_mul(7919).wrapping_add(1_000_000 * (task.index() as u64 + 1)).wrapping_add(i as u64)
}

/// `trials` randomized scenes per task. With and without ER the scenes,
/// instructions and seeds are identical; only the regression differs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_suite(
    model: &mut Model,
    norm: &Normalization,
    eval: &EvalConfig,
    er: &ErConfig,
    trials: usize,
    position: PositionMode,
    language: LanguageMode,
    with_er: bool,
) -> Result<SuiteResult> {
    Ok(run_suite(model, norm, eval, er, trials, position, language, with_er, 0)?.0)
}

/// [`evaluate_suite`], also returning the rollouts of the first
/// `keep_captures` trials of each task with their step captures.
#[allow(clippy::too_many_arguments)]
pub fn run_suite(
    model: &mut Model,
    norm: &Normalization,
    eval: &EvalConfig,
    er: &ErConfig,
    trials: usize,
    position: PositionMode,
    language: LanguageMode,
    with_er: bool,
    keep_captures: usize,
) -> Result<(SuiteResult, Vec<Rollout>)> {
    let mut out = SuiteResult { position, language, with_er, trials: Vec::new() };
    let mut kept = Vec::new();
    for task in Task::ALL {
        for i in 0..trials {
            let seed = trial_seed(eval.seed, task, i);
            let sample = sample_scene(task, position, language.split(), seed, &model.cfg.sim)?;
            let (slv, trace) = if with_er {
                let obs = Observation::of(&sample, model)?;
                let (s, t) = regress_slv(model, norm, &obs, &sample.instruction, er)?;
                (s, Some(t))
            } else {
                (vec![0.0; model.slv.dim], None)
            };
            let r = generate_motion(model, norm, &sample, &slv, eval.timeout_factor)?;
            out.trials.push(Trial { task, seed, instruction: sample.instruction, with_er, success: r.success, steps: r.steps, trace });
            if i < keep_captures {
                kept.push(r);
            }
        }
    }
    Ok((out, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::language::Vocabulary;
    use crate::sim::{demonstrate, InstructionBank};

    fn setup() -> (Model, Normalization) {
        let cfg = Config::tiny();
        let vocab = Vocabulary::from_corpus(&InstructionBank::new().corpus(Split::Train));
        let mut m = Model::new(&cfg, vocab, 2).unwrap();
        // nonzero LM-side projections so the language term reaches the SLV
        for (id, p) in m.store.iter().map(|(i, p)| (i, p.clone())).collect::<Vec<_>>() {
            if p.name.starts_with("slv.lm.") && p.name.ends_with(".2.w") {
                let v: Vec<f32> = (0..p.value.len()).map(|i| ((i * 31 % 13) as f32 - 6.0) * 0.02).collect();
                m.store.set(id, Tensor::new(p.value.shape(), v).unwrap()).unwrap();
            }
        }
        let norm = Normalization { joint_min: vec![-2.0; 5], joint_max: vec![2.0; 5], pixel_min: 0.0, pixel_max: 1.0 };
        (m, norm)
    }

    fn sample(cfg: &Config) -> Sample {
        sample_scene(Task::Lift, PositionMode::Training, Split::Train, 3, &cfg.sim).unwrap()
    }

    #[test]
    fn only_the_inference_slv_changes() {
        let (mut m, norm) = setup();
        let s = sample(&m.cfg);
        let obs = Observation::of(&s, &m).unwrap();
        let before_fixed = m.fixed_digest();
        let before_lm = m.lm_digest();
        let snapshot: Vec<Vec<f32>> = m.store.iter().map(|(_, p)| p.value.data().to_vec()).collect();
        let er = ErConfig { iterations: 3, ..m.cfg.er.clone() };
        let (slv, trace) = regress_slv(&mut m, &norm, &obs, &s.instruction, &er).unwrap();
        assert_eq!(m.fixed_digest(), before_fixed);
        assert_eq!(m.lm_digest(), before_lm);
        let changed: usize = m
            .store
            .iter()
            .zip(&snapshot)
            .map(|((_, p), old)| p.value.data().iter().zip(old).filter(|(a, b)| a != b).count())
            .sum();
        assert_eq!(changed, 5);
        assert_eq!(trace.records.len(), 3);
        assert!(trace.records[0].slv.iter().all(|&v| v == 0.0));
        assert_eq!(trace.final_slv, slv);
        for r in &trace.records {
            assert!((r.loss - (r.point + r.language)).abs() < 1e-5);
        }
    }

    #[test]
    fn iteration_count_contract() {
        let (mut m, norm) = setup();
        let s = sample(&m.cfg);
        let obs = Observation::of(&s, &m).unwrap();
        let zero = ErConfig { iterations: 0, ..m.cfg.er.clone() };
        assert!(regress_slv(&mut m, &norm, &obs, &s.instruction, &zero).is_err());
        let one = ErConfig { iterations: 1, ..m.cfg.er.clone() };
        let (slv, trace) = regress_slv(&mut m, &norm, &obs, &s.instruction, &one).unwrap();
        assert_eq!(trace.records.len(), 1);
        assert!(slv.iter().any(|&v| v != 0.0));
        assert!(regress_slv(&mut m, &norm, &obs, "lift the purple cube", &one).is_err());
    }

    #[test]
    fn skipping_regression_equals_a_zero_slv_rollout() {
        let (mut m, norm) = setup();
        let cfg = m.cfg.clone();
        let mut eval = cfg.eval.clone();
        eval.trials = 1;
        let a = evaluate_suite(&mut m, &norm, &eval, &cfg.er, 1, PositionMode::Training, LanguageMode::Seen, false).unwrap();
        let s = sample_scene(Task::Lift, PositionMode::Training, Split::Train, a.trials[0].seed, &cfg.sim).unwrap();
        let r1 = generate_motion(&m, &norm, &s, &[0.0; 5], eval.timeout_factor).unwrap();
        let r2 = generate_motion(&m, &norm, &s, &[0.0; 5], eval.timeout_factor).unwrap();
        assert_eq!(r1.trajectory, r2.trajectory);
        assert_eq!(a.trials[0].steps, r1.steps);
        assert_eq!(r1.steps, (eval.timeout_factor * demo_length(Task::Lift) as f32) as usize);
    }

    #[test]
    fn paired_suites_share_scenes() {
        let (mut m, norm) = setup();
        let cfg = m.cfg.clone();
        let a = evaluate_suite(&mut m, &norm, &cfg.eval, &cfg.er, 1, PositionMode::Test, LanguageMode::HeldOut, false).unwrap();
        let b = evaluate_suite(&mut m, &norm, &cfg.eval, &cfg.er, 1, PositionMode::Test, LanguageMode::HeldOut, true).unwrap();
        for (x, y) in a.trials.iter().zip(&b.trials) {
            assert_eq!((x.seed, &x.instruction), (y.seed, &y.instruction));
            assert!(x.trace.is_none() && y.trace.is_some());
        }
    }

    #[test]
    fn replaying_a_demonstration_through_the_loop_succeeds() {
        let cfg = Config::tiny();
        for task in Task::ALL {
            let s = sample_scene(task, PositionMode::Test, Split::HeldOut, 8, &cfg.sim).unwrap();
            let demo = demonstrate(&s, cfg.model.image_size, &cfg.sim).unwrap();
            let arm = Arm::new(&cfg.sim);
            let mut scene = s.scene.clone();
            let mut ok = false;
            for f in &demo.frames[1..] {
                let _ = record(&scene, &s.truth, cfg.model.image_size, &cfg.sim).unwrap();
                scene.step(&arm, &cfg.sim, &f.joints).unwrap();
                if scene.check_success(&s.truth, &cfg.sim) {
                    ok = true;
                    break;
                }
            }
            assert!(ok, "{task}");
        }
    }
}
