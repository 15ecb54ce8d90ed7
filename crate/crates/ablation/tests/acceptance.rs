//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Criteria 5 to 7 train 25 models at the default schedule and take the better
//! part of an hour on one core. `DDTR_ACCEPTANCE=fast` skips them (and reports
//! them as skipped) for quick iterations on the other criteria.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use ddtr_ablation::ablate::{make_row, run_seed, GridCell, SeedRun};
use ddtr_ablation::data::load_splits;
use ddtr_ablation::eval::predict;
use ddtr_ablation::report::{rows_from_json, to_csv, to_json};
use ddtr_ablation::train::train;
use ddtr_ablation::ExperimentConfig;
use ddtr_core::attention::{deformable_attention, mh_cross_attention, mhsa, AttentionVars, DeformableVars};
use ddtr_core::data::{generate, read_dataset, write_dataset, DatasetSpec};
use ddtr_core::loss::{giou_rows, set_loss, LabelSet};
use ddtr_core::metrics::{ap_at, ap_range, fauc, EvalImage};
use ddtr_core::model::{count_params_and_flops, weights, DeformableDetr};
use ddtr_core::nn::Graph;
use ddtr_core::tensor::{finite_diff_check, LevelGeometry, Result, Tape, Tensor, Var};
use ddtr_core::{hungarian_assign, EvalSet, ModelConfig, QueryInit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Op = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Largest finite-difference error of `op` over each of its inputs, with the
/// output reduced through fixed random weights.
fn op_error(inputs: &[Tensor<f64>], op: &Op, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for slot in 0..inputs.len() {
        let f = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
            let mut vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
            vars[slot] = v;
            let out = op(t, &vars)?;
            let shape = t.shape(out).to_vec();
            let w = t.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), &shape, -1.0, 1.0));
            let p = t.mul(out, w)?;
            t.sum(p)
        };
        worst = worst.max(finite_diff_check(f, &inputs[slot], 1e-5).unwrap().max_rel_error);
    }
    worst
}

/// Points inside a `h×w` map and off the cell-centre grid lines, where
/// bilinear interpolation is smooth.
fn smooth_locations(rng: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<f64> {
    let mut v = Vec::new();
    for _ in 0..count {
        let u = rng.gen_range(0..w - 1) as f64 + rng.gen_range(0.05..0.95) + 0.5;
        let y = rng.gen_range(0..h - 1) as f64 + rng.gen_range(0.05..0.95) + 0.5;
        v.push(u / w as f64);
        v.push(y / h as f64);
    }
    v
}

fn operation_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Op)> {
    let a = random(rng, &[3, 4], -2.0, 2.0);
    let b = random(rng, &[3, 4], -2.0, 2.0);
    let away = random(rng, &[3, 4], 0.5, 2.0);
    let pos = random(rng, &[3, 4], 0.2, 3.0);
    let prob = random(rng, &[3, 4], 0.05, 0.95);
    let levels = vec![LevelGeometry { start: 0, h: 4, w: 5 }, LevelGeometry { start: 20, h: 2, w: 3 }];
    let deform_locs = {
        let mut v = smooth_locations(rng, 4, 5, 6);
        v.extend(smooth_locations(rng, 2, 3, 6));
        Tensor::new(vec![2, 12], v).unwrap()
    };
    let boxes = |rng: &mut ChaCha8Rng| {
        let mut v = Vec::new();
        for _ in 0..3 {
            v.extend([
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.1..0.4),
                rng.gen_range(0.1..0.4),
            ]);
        }
        Tensor::new(vec![3, 4], v).unwrap()
    };
    let targets: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let attn_w = |rng: &mut ChaCha8Rng| [(); 4].map(|_| random(rng, &[4, 4], -0.8, 0.8));

    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Op)> = vec![
        ("matmul", vec![a.clone(), random(rng, &[4, 2], -1.0, 1.0)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![a.clone(), away.clone()], Box::new(|t, v| t.div(v[0], v[1]))),
        ("minimum", vec![a.clone(), b.clone()], Box::new(|t, v| t.minimum(v[0], v[1]))),
        ("maximum", vec![a.clone(), b.clone()], Box::new(|t, v| t.maximum(v[0], v[1]))),
        ("add_row", vec![a.clone(), random(rng, &[4], -1.0, 1.0)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.3))),
        ("shift", vec![a.clone()], Box::new(|t, v| t.shift(v[0], 0.4))),
        (
            "relu",
            vec![away.clone(), a.clone()],
            Box::new(|t, v| {
                let n = t.scale(v[0], -1.0)?;
                let x = t.add(n, v[1])?;
                t.relu(x)
            }),
        ),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("inverse_sigmoid", vec![prob], Box::new(|t, v| t.inverse_sigmoid(v[0], 1e-6))),
        (
            "abs",
            vec![away.clone()],
            Box::new(|t, v| {
                let n = t.scale(v[0], -1.0)?;
                t.abs(n)
            }),
        ),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        ("ln", vec![pos], Box::new(|t, v| t.ln(v[0]))),
        (
            "softmax",
            vec![random(rng, &[2, 3, 4], -3.0, 3.0)],
            Box::new(|t, v| {
                let s = t.softmax(v[0], 1)?;
                t.softmax(s, 2)
            }),
        ),
        (
            "layer_norm",
            vec![a.clone(), random(rng, &[4], 0.5, 1.5), random(rng, &[4], -0.5, 0.5)],
            Box::new(|t, v| t.layer_norm(v[0], 1, v[1], v[2], 1e-5)),
        ),
        (
            "sum",
            vec![a.clone()],
            Box::new(|t, v| {
                let s = t.sum(v[0])?;
                t.mul(s, s)
            }),
        ),
        (
            "mean",
            vec![a.clone()],
            Box::new(|t, v| {
                let s = t.mean(v[0])?;
                t.mul(s, s)
            }),
        ),
        ("slice_cols", vec![a.clone()], Box::new(|t, v| t.slice_cols(v[0], 1, 2))),
        (
            "concat_cols",
            vec![a.clone(), random(rng, &[3, 2], -1.0, 1.0)],
            Box::new(|t, v| t.concat_cols(&[v[1], v[0], v[1]])),
        ),
        ("concat_rows", vec![a.clone(), b.clone()], Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]]))),
        ("gather_rows", vec![a.clone()], Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2]))),
        ("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        (
            "conv2d",
            vec![
                random(rng, &[2, 7, 6], -1.0, 1.0),
                random(rng, &[3, 2, 3, 3], -0.5, 0.5),
                random(rng, &[3], -0.5, 0.5),
            ],
            Box::new(|t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        (
            "bilinear_sample",
            vec![random(rng, &[5, 6, 3], -1.0, 1.0), Tensor::new(vec![4, 2], smooth_locations(rng, 5, 6, 4)).unwrap()],
            Box::new(|t, v| t.bilinear_sample(v[0], v[1])),
        ),
        (
            "deform_aggregate",
            vec![random(rng, &[26, 4], -1.0, 1.0), deform_locs, random(rng, &[2, 6], 0.0, 1.0)],
            Box::new(move |t, v| t.deform_aggregate(v[0], v[1], v[2], 2, 3, &levels, &[0, 1])),
        ),
        (
            "sigmoid_focal_loss",
            vec![random(rng, &[3, 4], -4.0, 4.0)],
            Box::new(move |t, v| t.sigmoid_focal_loss(v[0], &targets, 0.25, 2.0)),
        ),
        ("giou", vec![boxes(rng), boxes(rng)], Box::new(|t, v| giou_rows(t, v[0], v[1]))),
    ];

    let mut inputs = vec![random(rng, &[3, 4], -1.0, 1.0), random(rng, &[3, 4], -1.0, 1.0)];
    inputs.extend(attn_w(rng));
    cases.push((
        "mhsa",
        inputs,
        Box::new(|t, v| mhsa(t, v[0], v[1], &AttentionVars { heads: 2, w_q: v[2], w_k: v[3], w_v: v[4], w_o: v[5] })),
    ));
    let mut inputs: Vec<Tensor<f64>> = (0..4).map(|_| random(rng, &[3, 4], -1.0, 1.0)).collect();
    inputs.extend(attn_w(rng));
    cases.push((
        "mh_cross_attention",
        inputs,
        Box::new(|t, v| {
            let p = AttentionVars { heads: 2, w_q: v[4], w_k: v[5], w_v: v[6], w_o: v[7] };
            mh_cross_attention(t, v[0], v[1], v[2], v[3], &p)
        }),
    ));

    let (n, d, heads, k) = (3, 4, 2, 2);
    let dl = vec![LevelGeometry { start: 0, h: 5, w: 5 }, LevelGeometry { start: 25, h: 3, w: 2 }];
    let mk = heads * k;
    let inputs = vec![
        random(rng, &[n, d], -1.0, 1.0),
        random(rng, &[n, 2], 0.1, 0.9),
        random(rng, &[31, d], -1.0, 1.0),
        random(rng, &[d, mk * 2], -0.5, 0.5),
        random(rng, &[mk * 2], -1.0, 1.0),
        random(rng, &[d, mk], -1.0, 1.0),
        random(rng, &[mk], -1.0, 1.0),
        random(rng, &[d, d], -0.5, 0.5),
        random(rng, &[d, d], -0.5, 0.5),
    ];
    cases.push((
        "deformable_attention",
        inputs,
        Box::new(move |t, v| {
            let p = DeformableVars {
                heads,
                samples: k,
                offset_w: v[3],
                offset_b: v[4],
                logit_w: v[5],
                logit_b: v[6],
                w_v: v[7],
                w_o: v[8],
            };
            Ok(deformable_attention(t, v[0], v[1], &[0, 1, 0], v[2], &dl, &p)?.output)
        }),
    ));
    cases
}

/// Worst error of the whole-model loss over 20 random scalar parameters, with
/// the matching frozen at the unperturbed assignment.
fn end_to_end_error(seed: u64) -> f64 {
    let cfg = ModelConfig::default();
    let spec = DatasetSpec { empty_fraction: 0.0, seed: 100 + seed, ..DatasetSpec::default() };
    let img = &generate(&spec, 1).unwrap()[0];
    let mut model = DeformableDetr::<f64>::new(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for e in model.params_mut().entries_mut() {
        for v in e.tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let x = img.to_tensor::<f64>();
    let labels = LabelSet::new(&img.annotations(), cfg.num_queries, cfg.num_classes).unwrap();
    let run = |model: &DeformableDetr<f64>, fixed: Option<&[ddtr_core::Assignment]>| {
        let mut g = Graph::bind(model.params());
        let xv = g.tape.constant(x.clone());
        let out = model.forward_graph(&mut g, xv).unwrap();
        let l = set_loss(&mut g.tape, &out.layers, &labels, &model.config().loss, fixed).unwrap();
        let value = g.tape.data(l.total)[0];
        g.tape.backward(l.total).unwrap();
        let grads: Vec<Vec<f64>> = model.params().ids().map(|id| g.param_grad(id)).collect();
        (value, grads, l.assignments)
    };
    let (_, grads, assignments) = run(&model, None);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let p = rng.gen_range(0..model.params().len());
        let i = rng.gen_range(0..model.params().entries()[p].tensor.numel());
        let orig = model.params().entries()[p].tensor.data()[i];
        let mut at = |v: f64| {
            model.params_mut().entries_mut()[p].tensor.data_mut()[i] = v;
            run(&model, Some(&assignments)).0
        };
        let numeric = (at(orig + 1e-5) - at(orig - 1e-5)) / 2e-5;
        at(orig);
        worst = worst.max((grads[p][i] - numeric).abs() / grads[p][i].abs().max(1.0));
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = ("", 0.0f64);
    let cases = operation_cases(&mut rng);
    let count = cases.len();
    for (i, (name, inputs, op)) in cases.iter().enumerate() {
        let e = op_error(inputs, op, i as u64);
        if e >= worst.1 {
            worst = (name, e);
        }
    }
    let e2e = (0..5).map(end_to_end_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst.1 < 1e-4 && e2e < 1e-4 && secs < 120.0,
        format!(
            "{count} ops, worst {} {:.2e}; end-to-end worst {e2e:.2e} over 5×20 params; {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for n in 2..=7 {
        for _ in 0..1000 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            if hungarian_assign(&cost, n).unwrap().total_cost != oracles::brute_force_min(&cost, n) {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(mismatches == 0 && secs < 30.0, format!("{mismatches} mismatches in 6000 matrices; {secs:.1}s"))
}

fn criterion_3() -> Outcome {
    use oracles::{ap_oracle, bx, det, fauc_oracle, random_set};
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let e = random_set(&mut rng, trial % 2 == 1);
        if ap_at(&e, 0.1).ok() != ap_oracle(&e, 0.1) || fauc(&e, 1.0).ok() != fauc_oracle(&e) {
            mismatches += 1;
        }
    }
    let lesion = bx(0.2, 0.2, 0.4, 0.4);
    let far = bx(0.7, 0.7, 0.9, 0.9);
    let fauc_example = EvalSet {
        images: vec![
            EvalImage { lesions: vec![lesion], detections: vec![det(lesion, 0.9)] },
            EvalImage { lesions: vec![lesion], detections: vec![det(far, 0.8), det(lesion, 0.7)] },
        ],
    };
    // `partial` overlaps the unit lesion with IoU exactly 0.3
    let unit = bx(0.0, 0.0, 1.0, 1.0);
    let partial = bx(0.0, 0.0, 0.3, 1.0);
    let one = EvalSet { images: vec![EvalImage { lesions: vec![unit], detections: vec![det(partial, 0.5)] }] };
    let two = EvalSet {
        images: vec![EvalImage {
            lesions: vec![unit],
            detections: vec![det(bx(5.0, 5.0, 6.0, 6.0), 0.9), det(partial, 0.5)],
        }],
    };
    let examples = [
        fauc(&fauc_example, 1.0).ok() == Some(0.75),
        ap_at(&one, 0.1).ok() == Some(1.0),
        ap_at(&two, 0.1).ok() == Some(0.5),
        ap_range(&one).ok() == Some(5.0 / 9.0),
    ];
    let secs = start.elapsed().as_secs_f64();
    let ok_examples = examples.iter().filter(|&&b| b).count();
    outcome(
        mismatches == 0 && ok_examples == examples.len() && secs < 60.0,
        format!("{mismatches} mismatches in 1000 sets; {ok_examples}/4 worked examples exact; {secs:.1}s"),
    )
}

fn criterion_4() -> Outcome {
    let x = {
        let spec = DatasetSpec { empty_fraction: 0.0, ..DatasetSpec::default() };
        generate(&spec, 2).unwrap().iter().map(|i| i.to_tensor::<f64>()).collect::<Vec<_>>()
    };
    let mut failures = Vec::new();
    let perturbed = |cfg: ModelConfig, seed: u64| {
        let mut m = DeformableDetr::<f64>::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in m.params_mut().entries_mut() {
            for v in e.tensor.data_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
        }
        m
    };
    for n in [5, 10, 25, 50, 100, 200, 400, 800] {
        let p = DeformableDetr::<f64>::new(ModelConfig { num_queries: n, ..ModelConfig::default() }, 0)
            .unwrap()
            .forward(&x[0])
            .unwrap();
        if !p.layers.iter().all(|l| l.boxes.shape() == [n, 4] && l.logits.shape() == [n, 2]) {
            failures.push(format!("N={n} count"));
        }
    }
    let p = perturbed(ModelConfig::default(), 1).forward(&x[0]).unwrap();
    if !p.layers.iter().all(|l| l.references == p.layers[0].references) {
        failures.push("reference points vary without refinement".into());
    }
    let p = perturbed(ModelConfig { ibbr: true, ..ModelConfig::default() }, 1).forward(&x[0]).unwrap();
    if !p.layers.iter().all(|l| l.references.data().iter().all(|&v| v > 0.0 && v < 1.0)) {
        failures.push("refined reference point outside (0,1)".into());
    }
    let m = perturbed(ModelConfig { encoder_layers: 0, ..ModelConfig::default() }, 2);
    let mut g = Graph::bind(m.params());
    let xv = g.tape.constant(x[0].clone());
    let out = m.forward_graph(&mut g, xv).unwrap();
    if g.tape.value(out.encoder_out) != g.tape.value(out.projected_tokens) {
        failures.push("encoder_layers = 0 changed the tokens".into());
    }
    // attention weights of a random deformable block
    let mut t = Tape::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let levels = [LevelGeometry { start: 0, h: 4, w: 4 }];
    let mut c = |shape: &[usize], s: f64| t.constant(random(&mut rng, shape, -s, s));
    let (q, tok) = (c(&[6, 8], 1.0), c(&[16, 8], 1.0));
    let p = DeformableVars {
        heads: 2,
        samples: 4,
        offset_w: c(&[8, 16], 2.0),
        offset_b: c(&[16], 2.0),
        logit_w: c(&[8, 8], 30.0),
        logit_b: c(&[8], 30.0),
        w_v: c(&[8, 8], 1.0),
        w_o: c(&[8, 8], 1.0),
    };
    let r = t.constant(Tensor::full(vec![6, 2], 0.5));
    let o = deformable_attention(&mut t, q, r, &[0; 6], tok, &levels, &p).unwrap();
    let worst_sum = t.data(o.weights).chunks(4).map(|w| (w.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    if worst_sum > 1e-12 {
        failures.push(format!("deformable weights sum off by {worst_sum:e}"));
    }
    let m = DeformableDetr::<f64>::new(ModelConfig::default(), 4).unwrap();
    let queries = |img: &Tensor<f64>| {
        let mut g = Graph::bind(m.params());
        let xv = g.tape.constant(img.clone());
        let out = m.forward_graph(&mut g, xv).unwrap();
        let q = &out.queries;
        (g.tape.value(q.content).clone(), g.tape.value(q.positional).clone(), g.tape.value(q.references).clone())
    };
    if queries(&x[0]) != queries(&x[1]) {
        failures.push("static queries depend on the image".into());
    }
    let pure = perturbed(
        ModelConfig { query_init: QueryInit::Pure, feature_levels: vec![1, 2, 3, 4], ..ModelConfig::default() },
        5,
    );
    let refs = |img: &Tensor<f64>| pure.forward(img).unwrap().layers[0].references.clone();
    if refs(&x[0]) == refs(&x[1]) {
        failures.push("pure queries ignore the image".into());
    }
    let detail = if failures.is_empty() { "all structural checks hold".to_string() } else { failures.join("; ") };
    outcome(failures.is_empty(), detail)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trained runs keyed by variant name, all five seeds each.
struct Runs {
    by_variant: BTreeMap<&'static str, (ExperimentConfig, Vec<SeedRun>)>,
}

impl Runs {
    fn train_all() -> Self {
        let base = ExperimentConfig::default();
        let splits = load_splits(&base, None).unwrap();
        let variant = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        let configs: [(&'static str, ExperimentConfig); 5] = [
            ("default", base.clone()),
            ("enc3", variant(&|c| c.model.encoder_layers = 3)),
            ("enc6", variant(&|c| c.model.encoder_layers = 6)),
            ("n5", variant(&|c| c.model.num_queries = 5)),
            ("n100", variant(&|c| c.model.num_queries = 100)),
        ];
        let mut by_variant = BTreeMap::new();
        for (name, cfg) in configs {
            let runs: Vec<SeedRun> = cfg
                .seeds
                .iter()
                .map(|&s| {
                    let r = run_seed(&cfg, &splits, s).unwrap();
                    eprintln!(
                        "  {name} seed {s}: ap10 {:.3} fauc {:.3} L {:.3} ({:.0}s)",
                        r.metrics.ap_10.unwrap_or(f64::NAN),
                        r.metrics.fauc_1_10.unwrap_or(f64::NAN),
                        r.metrics.loc_l.unwrap_or(f64::NAN),
                        r.seconds
                    );
                    r
                })
                .collect();
            by_variant.insert(name, (cfg, runs));
        }
        Self { by_variant }
    }

    fn mean_of(&self, name: &str, f: impl Fn(&SeedRun) -> f64) -> f64 {
        mean(self.by_variant[name].1.iter().map(f))
    }

    fn ap(&self, name: &str) -> f64 {
        self.mean_of(name, |r| r.metrics.ap_10.unwrap_or(0.0))
    }
}

fn criterion_5(runs: &Runs) -> Outcome {
    let ap = runs.ap("default");
    let fa = runs.mean_of("default", |r| r.metrics.fauc_1_10.unwrap_or(0.0));
    let slowest = runs.by_variant["default"].1.iter().map(|r| r.seconds).fold(0.0, f64::max);
    outcome(
        ap >= 0.80 && fa >= 0.70 && slowest < 1200.0,
        format!("mean AP10 {ap:.3} (need 0.80), mean FAUC {fa:.3} (need 0.70), slowest seed {slowest:.0}s"),
    )
}

fn criterion_6(runs: &Runs) -> Outcome {
    let (a1, a3, a6) = (runs.ap("default"), runs.ap("enc3"), runs.ap("enc6"));
    let secs = |n: &str| runs.mean_of(n, |r| r.seconds);
    let (s1, s3, s6) = (secs("default"), secs("enc3"), secs("enc6"));
    let madds = |n: &str| count_params_and_flops(&runs.by_variant[n].0.model, 64, 64).unwrap().madds;
    let (m1, m3, m6) = (madds("default"), madds("enc3"), madds("enc6"));
    let close = (a1 - a6).abs() <= 0.03 && (a3 - a6).abs() <= 0.03;
    outcome(
        close && s1 < s3 && s3 < s6 && m1 < m3 && m3 < m6,
        format!("AP10 1/3/6 layers {a1:.3}/{a3:.3}/{a6:.3}; seconds {s1:.0}/{s3:.0}/{s6:.0}; madds {m1}/{m3}/{m6}"),
    )
}

fn criterion_7(runs: &Runs) -> Outcome {
    let (a5, a100) = (runs.ap("n5"), runs.ap("n100"));
    let l = |n: &str| runs.mean_of(n, |r| r.metrics.loc_l.unwrap_or(0.0));
    let (l5, l100) = (l("n5"), l("n100"));
    outcome(
        a100 - a5 >= 0.05 && l100 - l5 >= -0.01,
        format!("AP10 N=5 {a5:.3} -> N=100 {a100:.3} (gain {:.3}, need 0.05); L {l5:.3} -> {l100:.3}", a100 - a5),
    )
}

fn short_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.training.steps = 100;
    c.seeds = vec![3];
    c.dataset = ddtr_ablation::DatasetSource::Synthetic { spec: DatasetSpec::default(), train: 200, test: 40 };
    c
}

fn criterion_8() -> Outcome {
    let cfg = short_config();
    let splits = load_splits(&cfg, None).unwrap();
    let once = || {
        let out = train(&cfg, &splits.train, 3).unwrap();
        let preds = predict(&out.model, &splits.test).unwrap();
        let run = run_seed(&cfg, &splits, 3).unwrap();
        let cell = GridCell { label: "default".into(), x: 0.0, config: cfg.clone() };
        let mut row = make_row(None, &cell, &[run], 64, 64).unwrap();
        row.seconds = 0.0;
        (out.trace, preds, to_csv(&[row.clone()]).unwrap(), to_json(&[row]))
    };
    let (a, b) = (once(), once());
    let same = [a.0 == b.0, a.1 == b.1, a.2 == b.2 && a.3 == b.3];
    outcome(
        same.iter().all(|&s| s),
        format!(
            "loss trace identical: {}, predictions identical: {}, reports identical: {}",
            same[0], same[1], same[2]
        ),
    )
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let images = generate(&DatasetSpec::default(), 100).unwrap();
    write_dataset(&images, &dir.path().join("data")).unwrap();
    let dataset = read_dataset(&dir.path().join("data")).unwrap() == images;

    let cfg = short_config();
    let splits = load_splits(&cfg, None).unwrap();
    let trained = train(&cfg, &splits.train, 1).unwrap().model;
    let path = dir.path().join("w.bin");
    weights::save(trained.params(), &path).unwrap();
    let mut fresh = DeformableDetr::<f64>::new(cfg.model.clone(), 99).unwrap();
    weights::load(fresh.params_mut(), &path).unwrap();
    let weights_ok = fresh.params() == trained.params()
        && predict(&fresh, &splits.test).unwrap() == predict(&trained, &splits.test).unwrap();

    let run = run_seed(&cfg, &splits, 1).unwrap();
    let cell = GridCell { label: "default".into(), x: 0.0, config: cfg.clone() };
    let rows = vec![make_row(None, &cell, &[run], 64, 64).unwrap()];
    let json = to_json(&rows);
    let back = rows_from_json(&json).unwrap();
    let reports = to_json(&back) == json && to_csv(&back).unwrap() == to_csv(&rows).unwrap();
    outcome(
        dataset && weights_ok && reports,
        format!("dataset exact: {dataset}, weights exact: {weights_ok}, reports byte-identical: {reports}"),
    )
}

fn main() {
    // Tolerate libtest-style arguments such as `--nocapture` or a name filter.
    let fast = std::env::var("DDTR_ACCEPTANCE").is_ok_and(|v| v == "fast");
    let mut results: Vec<(usize, &str, Option<Outcome>)> = Vec::new();
    let mut record = |n: usize, title: &'static str, o: Option<Outcome>| {
        let line = match &o {
            Some(o) => format!("criterion {n} [{}] {title}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
            None => format!("criterion {n} [SKIP] {title}: DDTR_ACCEPTANCE=fast"),
        };
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
        results.push((n, title, o));
    };
    record(1, "gradient correctness", Some(criterion_1()));
    record(2, "Hungarian oracle", Some(criterion_2()));
    record(3, "metric oracles", Some(criterion_3()));
    record(4, "structural invariants", Some(criterion_4()));
    let runs = (!fast).then(Runs::train_all);
    record(5, "desk-scale training", runs.as_ref().map(criterion_5));
    record(6, "encoder depth", runs.as_ref().map(criterion_6));
    record(7, "query count", runs.as_ref().map(criterion_7));
    record(8, "determinism", Some(criterion_8()));
    record(9, "format round trips", Some(criterion_9()));

    let failed: Vec<usize> = results.iter().filter(|r| r.2.as_ref().is_some_and(|o| !o.pass)).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all evaluated criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
