mod common;

use common::fixtures::{tiny_data, tiny_model};
use common::{flat, random_mat, Mat};
use rand::Rng;
use tmf_autodiff::{grad_check, grad_check_report, Element, ParamId, Result, ScalarFn, Tape, Tensor, Var};
use tmf_core::data::{Dataset, EvalInstance};
use tmf_core::fusion::{fuse, FusionConfig, FusionMode};
use tmf_core::lm::nll_loss;
use tmf_core::model::TmfModel;
use tmf_core::prompt::{render_prompt, HybridPrompt, Level};

const TOL: f64 = 1e-4;
const H: f64 = 1e-3;

fn tensor32(m: &Mat) -> Tensor<f32> {
    Tensor::matrix(m.len(), m[0].len(), flat(m).into_iter().map(|v| v as f32).collect()).unwrap()
}

fn weighted_sum<F: Element>(tape: &mut Tape<F>, v: Var) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| F::lit(((i * 5 % 13) as f64 - 6.0) / 4.0)).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

#[derive(Clone, Copy)]
enum FuseArg {
    WQ,
    Image,
    Graph,
}

struct FuseCase {
    cfg: FusionConfig,
    image: Tensor<f32>,
    text: Tensor<f32>,
    graph: Tensor<f32>,
    w_q: Tensor<f32>,
    arg: FuseArg,
}

impl ScalarFn for FuseCase {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let mut c = |t: &Tensor<f32>| tape.constant(t.cast());
        let (mut i, t, mut g, mut w) = (c(&self.image), c(&self.text), c(&self.graph), c(&self.w_q));
        match self.arg {
            FuseArg::WQ => w = x,
            FuseArg::Image => i = x,
            FuseArg::Graph => g = x,
        }
        let out = fuse(tape, &self.cfg, i, t, g, w).map_err(unwrap_tensor)?.output;
        weighted_sum(tape, out)
    }
}

fn unwrap_tensor(e: tmf_core::TmfError) -> tmf_autodiff::TensorError {
    match e {
        tmf_core::TmfError::Tensor(t) => t,
        other => tmf_autodiff::TensorError::Usage(other.to_string()),
    }
}

#[test]
fn fused_stack_gradients_match_finite_differences() {
    for seed in 0..12u64 {
        for mode in [FusionMode::Full, FusionMode::AmsaOnly] {
            let cfg = FusionConfig {
                heads: 1 + (seed as usize % 2),
                mode,
                ..FusionConfig::default()
            };
            let mut rng = common::rng(seed);
            let n = 3;
            let image = tensor32(&random_mat(&mut rng, n, cfg.d_v));
            let text = tensor32(&random_mat(&mut rng, n, cfg.d_t));
            let graph = tensor32(&random_mat(&mut rng, n, cfg.d_g));
            let w_q = tensor32(&random_mat(&mut rng, cfg.d(), cfg.d_v));
            for arg in [FuseArg::WQ, FuseArg::Image, FuseArg::Graph] {
                let case = FuseCase {
                    cfg: cfg.clone(),
                    image: image.clone(),
                    text: text.clone(),
                    graph: graph.clone(),
                    w_q: w_q.clone(),
                    arg,
                };
                let x = match arg {
                    FuseArg::WQ => &w_q,
                    FuseArg::Image => &image,
                    FuseArg::Graph => &graph,
                };
                let err = grad_check(&case, x, H).unwrap();
                assert!(err <= TOL, "seed {seed} mode {mode:?}: {err}");
            }
        }
    }
}

/// Full model loss with one parameter replaced by the probe variable.
struct ModelCase<'a> {
    model: &'a TmfModel,
    ds: &'a Dataset,
    prompt: HybridPrompt,
    inst: &'a EvalInstance,
    param: ParamId,
}

impl ScalarFn for ModelCase<'_> {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let b = self.model.store.bind_with_override(tape, self.param, x);
        self.model
            .prompt_loss(tape, &b, &self.prompt, &self.inst.sequence.history, &self.ds.embeddings)
            .map_err(unwrap_tensor)
    }
}

fn perturb(model: &mut TmfModel, id: ParamId, seed: u64) {
    let mut rng = common::rng(seed);
    let v = model.store.value(id).clone();
    let data = v.data().iter().map(|_| rng.random_range(-0.5f32..0.5)).collect();
    model.store.set_value(id, Tensor::new(v.shape().to_vec(), data).unwrap()).unwrap();
}

#[test]
fn prompt_loss_gradients_match_finite_differences_for_every_group() {
    for seed in 0..10u64 {
        let ds = tiny_data(seed);
        let mut model = tiny_model(seed, &ds);
        model.attach_lora().unwrap();
        let lora_b = model.store.find("lora.1.v.b").unwrap();
        perturb(&mut model, lora_b, seed);
        // a sequence of repeated items makes every attention row uniform
        let inst = ds
            .train
            .iter()
            .find(|i| {
                let mut items: Vec<u32> = i.sequence.history_items().collect();
                items.sort();
                items.dedup();
                items.len() >= 3
            })
            .unwrap();
        let prompt = render_prompt(&model.vocab, &ds.catalog, &inst.sequence, &inst.candidates, Level::Hard, seed).unwrap();
        let names = ["psi_f.w_q", "psi_i.w1", "psi_i.b2", "psi_b.w1", "lora.0.q.a", "lora.1.v.b", "lm.1.w_fc", "lm.lnf.g"];
        for name in names {
            let param = model.store.find(name).unwrap();
            let case = ModelCase {
                model: &model,
                ds: &ds,
                prompt: prompt.clone(),
                inst,
                param,
            };
            let report = grad_check_report(&case, model.store.value(param), H).unwrap();
            assert!(report.max_rel_error <= TOL, "seed {seed} {name}: {}", report.max_rel_error);
            if name.starts_with("psi") {
                assert!(report.analytic.iter().any(|&g| g != 0.0), "no gradient reached {name}");
            }
        }
    }
}

struct LmCase<'a> {
    model: &'a TmfModel,
    targets: Vec<u32>,
}

impl ScalarFn for LmCase<'_> {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let b = self.model.store.bind_frozen(tape);
        let h = self.model.lm.hidden(tape, &b, x).map_err(unwrap_tensor)?;
        let n = self.targets.len();
        let len = tape.shape(h)[0];
        let logits = self.model.lm.logits_at(tape, &b, h, len - n, n).map_err(unwrap_tensor)?;
        nll_loss(tape, logits, &self.targets).map_err(unwrap_tensor)
    }
}

#[test]
fn lm_gradient_on_an_eight_token_fixture() {
    for seed in 0..10u64 {
        let ds = tiny_data(seed);
        let model = tiny_model(seed, &ds);
        let mut rng = common::rng(seed);
        let x = tensor32(&random_mat(&mut rng, 8, model.cfg.lm.d_llm));
        let targets = (0..3).map(|_| rng.random_range(5..model.vocab.len() as u32)).collect();
        let err = grad_check(&LmCase { model: &model, targets }, &x, H).unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

struct AdaptorCase<'a> {
    model: &'a TmfModel,
}

impl ScalarFn for AdaptorCase<'_> {
    fn eval<F: Element>(&self, tape: &mut Tape<F>, x: Var) -> Result<Var> {
        let b = self.model.store.bind_frozen(tape);
        let y = self.model.psi_i.forward(tape, &b, x).map_err(unwrap_tensor)?;
        weighted_sum(tape, y)
    }
}

#[test]
fn adaptor_gradient_with_respect_to_its_input() {
    for seed in 0..10u64 {
        let ds = tiny_data(seed);
        let model = tiny_model(seed, &ds);
        let mut rng = common::rng(seed + 100);
        let x = tensor32(&random_mat(&mut rng, 4, model.psi_i.d_in));
        let err = grad_check(&AdaptorCase { model: &model }, &x, H).unwrap();
        assert!(err <= TOL, "seed {seed}: {err}");
    }
}

#[test]
fn two_answer_token_loss_matches_direct_softmax() {
    let mut rng = common::rng(7);
    let z = random_mat(&mut rng, 2, 6);
    let targets = [4u32, 1];
    let mut tape = Tape::<f64>::new();
    let zv = tape.constant(Tensor::matrix(2, 6, flat(&z)).unwrap());
    let l = nll_loss(&mut tape, zv, &targets).unwrap();
    let loss = tape.value(l).item();
    let direct: f64 = z
        .iter()
        .zip(targets)
        .map(|(row, t)| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t as usize]
        })
        .sum::<f64>()
        / 2.0;
    assert!((loss - direct).abs() < 1e-12);
}
