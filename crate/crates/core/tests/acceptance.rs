//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Criteria 9 and 10 train dozens of full incremental runs and only execute
//! with `--include-ignored` (or `--ignored`):
//!
//! ```text
//! cargo test --release -p contiseg --test acceptance -- --include-ignored
//! ```

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::{label_map, miou_oracle, permutation_oracle, pq_oracle, segments_from, sort_oracle};
use contiseg::autograd::Graph;
use contiseg::config::Config;
use contiseg::csl::{csl_loss, csl_value, previous_stage_selection, CslTeacher};
use contiseg::data::{generate, stage_view, Image, Segment};
use contiseg::gradcheck::{check_input_gradient, check_param_gradients, pseudo_random_tensor, DEFAULT_EPS};
use contiseg::harness::{build_loss, previous_model_cache, run, run_joint, Item, RunOptions, RunRecord, StagePlan};
use contiseg::matching::{assignment_cost, hungarian};
use contiseg::metrics::{mean_iou, panoptic_quality};
use contiseg::model::{ForwardSpec, MultiScaleFeatureMap, SegModel};
use contiseg::qpa::{initialize_queries, select_topk, PrototypeSet, ScoreField, SelectionIndex};
use contiseg::storage::{bank_payload_bytes, image_replay_bytes, image_replay_dir_bytes, vq_capacity_bytes, write_image_replay, ReferenceScale};
use contiseg::tensor::Tensor;
use contiseg::vq_bank::{pseudo_weights, sample_virtual, VirtualQueryBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const MINUTE: Duration = Duration::from_secs(60);

/// Relative gradient tolerance for criteria 2 and 8.
const GRAD_REL_TOL: f64 = 1e-3;
/// Gradient magnitude below which errors are measured absolutely: about ten
/// times the central-difference roundoff of an O(1) loss at eps = 1e-6.
const GRAD_FLOOR: f64 = 1e-5;

/// Toy scale for the end-to-end runs on the 8-2 plan (16 classes, 5 stages).
const TOY: &[&str] = &[
    "model.hidden_dim=32",
    "model.ffn_dim=64",
    "plan.base_classes=8",
    "plan.increment=2",
    "data.num_classes=16",
    "plan.lr_base=1e-3",
    "plan.lr_incremental=5e-4",
    "plan.base_iters=3000",
    "plan.iters_per_class=300",
];
const SEEDS: u64 = 5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn skip_attention_isolation() -> Outcome {
    let mut cfg = Config::default().model;
    let mut worst = String::new();
    let mut ok = true;
    for seed in 0..100u64 {
        cfg.num_queries = 20;
        let mut m = SegModel::new(&cfg, 32, 3, 16, seed);
        let d = m.hidden_dim();
        m.set_prototypes(PrototypeSet { vectors: pseudo_random_tensor(4, d, seed + 7), class_ids: vec![0, 1, 2, 3], stage_of: vec![1; 4] });
        let img = generate(&Config::default().shape_world(), seed).0;
        let visible = [0, 1, 2, 3];
        let spec = ForwardSpec { visible: &visible, qpa: seed % 2 == 0, stop_gradient: true, virtual_queries: None };
        let base = m.predict(&img, &spec).expect("forward");
        for j in [1, 20, 80] {
            let v = pseudo_random_tensor(j, d, seed * 1000 + j as u64);
            let with = m.predict(&img, &ForwardSpec { virtual_queries: Some(&v), ..spec.clone() }).expect("forward");
            if with.final_queries != base.final_queries || with.class_logits != base.class_logits || with.mask_logits != base.mask_logits {
                ok = false;
                worst = format!("seed {seed} j={j} differs");
            }
        }
    }
    outcome(ok, if ok { "100 seeds × j∈{1,20,80} bitwise identical".into() } else { worst })
}

// ---------------------------------------------------------------- 2

fn gradient_barrier() -> Outcome {
    // features → QPA copy → fixed linear read-out → BCE; the copy is the only path
    let index = SelectionIndex { triples: vec![], flat: vec![5, 1, 3, 1], scores: vec![0.0; 4] };
    let w = pseudo_random_tensor(3, 6, 11);
    let x = pseudo_random_tensor(8, 6, 12);
    let net = |barrier: bool| {
        let index = index.clone();
        let w = w.clone();
        move |g: &mut Graph, f| {
            let q = initialize_queries(g, f, &index, barrier).expect("indices in range");
            let wv = g.constant(w.clone());
            let s = g.matmul_t(q, wv);
            g.sigmoid_bce(s, &Tensor::full(4, 3, 0.3))
        }
    };
    let mut g = Graph::new();
    let f = g.input(x.clone());
    let loss = net(true)(&mut g, f);
    let norm_on = g.backward(loss).of(f).map_or(0.0, Tensor::norm);
    let off = check_input_gradient(&net(false), &x, DEFAULT_EPS);
    let pass = norm_on == 0.0 && off.max_rel_err_above(GRAD_FLOOR) <= GRAD_REL_TOL;
    outcome(pass, format!("barrier on: ‖∂F‖ = {norm_on:e}; barrier off: max rel err {:.2e} over {} coords", off.max_rel_err_above(GRAD_FLOOR), off.checked))
}

// ---------------------------------------------------------------- 3

fn topk_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    for case in 0..1000 {
        let levels = rng.random_range(1..=3);
        let mut sizes = Vec::new();
        let mut total = 0;
        for _ in 0..levels {
            let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
            if total + h * w > 500 {
                break;
            }
            total += h * w;
            sizes.push((h, w));
        }
        if sizes.is_empty() {
            sizes.push((1, 1));
            total = 1;
        }
        // half the fields draw from a 5-value alphabet so ties are common
        let scores: Vec<f64> =
            (0..total).map(|_| if case % 2 == 0 { f64::from(rng.random_range(0..5)) } else { rng.random_range(-1.0..1.0) }).collect();
        let field = ScoreField { sizes, scores };
        let order = sort_oracle(&field.scores, total);
        for n in 0..=total {
            let sel = select_topk(&field, n).expect("n ≤ |Ω|");
            if sel.flat != order[..n] || sel.triples.iter().zip(&sel.flat).any(|(l, &f)| field.flat_index(*l) != f) {
                return outcome(false, format!("case {case} n={n}: {:?} vs {:?}", sel.flat, &order[..n]));
            }
            checked += 1;
        }
        if select_topk(&field, total + 1).is_ok() {
            return outcome(false, format!("case {case}: n > |Ω| accepted"));
        }
    }
    outcome(true, format!("1000 fields, {checked} (field, N) pairs equal to the sort oracle"))
}

// ---------------------------------------------------------------- 4

fn hungarian_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..500 {
        let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let cost: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| if case % 2 == 0 { f64::from(rng.random_range(0..6)) } else { rng.random_range(-5.0..5.0) }).collect())
            .collect();
        let mut pairs = hungarian(&cost);
        pairs.sort();
        let got = assignment_cost(&cost, &pairs);
        let best = permutation_oracle(&cost);
        if got != best || pairs.len() != r.min(c) {
            return outcome(false, format!("case {case} ({r}×{c}): {got} vs oracle {best}"));
        }
    }
    outcome(true, "500 matrices up to 7×7 equal to the permutation oracle")
}

// ---------------------------------------------------------------- 5

fn csl_correctness() -> Outcome {
    // identical features at the previous selection
    let fm = MultiScaleFeatureMap { sizes: vec![(2, 2), (4, 4)], levels: vec![pseudo_random_tensor(4, 6, 1), pseudo_random_tensor(16, 6, 2)] };
    let protos = PrototypeSet { vectors: pseudo_random_tensor(3, 6, 3), class_ids: vec![0, 1, 2], stage_of: vec![1; 3] };
    let teacher = previous_stage_selection(&fm, &protos, 5).expect("selection");
    let mut g = Graph::new();
    let omega = g.input(fm.omega());
    let l = csl_loss(&mut g, omega, &teacher).expect("loss");
    let same = g.value(l).item();

    // K=1, D=1: teacher logits (0, 0), student logits (ln 2, 0)
    let hand = 0.5 * 1.5f64.ln() + 0.5 * 0.75f64.ln();
    let teacher = CslTeacher {
        index: SelectionIndex { triples: vec![], flat: vec![0], scores: vec![0.0] },
        prototypes: Tensor::from_rows(&[vec![1.0], vec![0.0]]),
        logits: Tensor::from_rows(&[vec![0.0, 0.0]]),
    };
    let mut g = Graph::new();
    let omega = g.input(Tensor::from_rows(&[vec![2f64.ln()]]));
    let l = csl_loss(&mut g, omega, &teacher).expect("loss");
    let two_class = g.value(l).item();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min = f64::INFINITY;
    for _ in 0..10_000 {
        let (k, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let scale = rng.random_range(0.01..10.0);
        let t = Tensor::from_vec(k, c, (0..k * c).map(|_| rng.random_range(-scale..scale)).collect());
        let s = Tensor::from_vec(k, c, (0..k * c).map(|_| rng.random_range(-scale..scale)).collect());
        min = min.min(csl_value(&t, &s));
    }
    let pass = same.abs() <= 1e-9 && (two_class - 0.0589).abs() <= 1e-4 && (hand - 0.0589).abs() <= 1e-4 && min >= 0.0;
    outcome(pass, format!("identical: {same:.1e}; two-class: {two_class:.6}; min over 10000 random: {min:.3e}"))
}

// ---------------------------------------------------------------- 6

fn pseudo_distribution() -> Outcome {
    let w = pseudo_weights(&BTreeMap::from([(0, 9), (1, 1)]));
    let (w0, w1) = (w[&0], w[&1]);
    let eval_ok = (w0 - 1.054).abs() <= 1e-3
        && (w1 - 3.162).abs() <= 1e-3
        && (w0 - (10.0f64 / 9.0).sqrt()).abs() <= 1e-6
        && (w1 - 10f64.sqrt()).abs() <= 1e-6;

    // three classes with uneven counts; frequencies should follow ω / Σω
    let counts = BTreeMap::from([(2, 12), (5, 3), (9, 1)]);
    let weights = pseudo_weights(&counts);
    let mut bank = VirtualQueryBank::new(4, 2);
    for &c in counts.keys() {
        for k in 0..3 {
            bank.push(c, &[c as f64, k as f64]).expect("finite");
        }
    }
    let draws = 100_000;
    let sample = sample_virtual(&bank, &weights, draws, &mut ChaCha8Rng::seed_from_u64(6));
    let total: f64 = weights.values().sum();
    let mut stat = 0.0;
    for (&c, &wc) in &weights {
        let observed = sample.classes.iter().filter(|&&x| x == c).count() as f64;
        let expected = draws as f64 * wc / total;
        stat += (observed - expected).powi(2) / expected;
    }
    let p = ChiSquared::new((weights.len() - 1) as f64).expect("df > 0").sf(stat);
    outcome(eval_ok && p > 0.01, format!("ω = ({w0:.6}, {w1:.6}); χ² = {stat:.3}, p = {p:.3} over {draws} draws"))
}

// ---------------------------------------------------------------- 7

fn metric_correctness() -> Outcome {
    let seg = |class, range: std::ops::Range<usize>| Segment { class_id: class, mask: (0..40).map(|i| range.contains(&i)).collect() };
    // TP at IoU 8/10, one unmatched prediction, one unmatched ground truth
    let gt = vec![seg(0, 0..10), seg(0, 30..35)];
    let pred = vec![seg(0, 0..8), seg(0, 20..25)];
    let constructed = panoptic_quality(&pred, &gt);

    let cfg = Config::default();
    let mut identity_ok = true;
    for i in 0..10 {
        let ann = generate(&cfg.shape_world(), i).1;
        let lm = ann.label_map();
        identity_ok &= panoptic_quality(&ann.segments, &ann.segments) == Some(1.0) && mean_iou(&lm, &lm) == Some(1.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    for _ in 0..200 {
        let pixels = rng.random_range(4..=30);
        let instances = rng.random_range(2..=6);
        let mut draw = || {
            let map: Vec<usize> = (0..pixels).map(|_| rng.random_range(0..instances)).collect();
            let classes: Vec<u32> = (0..instances).map(|_| rng.random_range(0..3)).collect();
            segments_from(&map, &classes)
        };
        let (p, g) = (draw(), draw());
        let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => (a - b).abs() < 1e-12,
            (a, b) => a == b,
        };
        let (pm, gm) = (label_map(&p, pixels), label_map(&g, pixels));
        if close(panoptic_quality(&p, &g), pq_oracle(&p, &g)) && close(mean_iou(&pm, &gm), miou_oracle(&pm, &gm)) {
            agree += 1;
        }
    }
    let pass = constructed == Some(0.4) && identity_ok && agree == 200;
    outcome(pass, format!("constructed PQ {constructed:?}; identity {identity_ok}; oracle agreement {agree}/200"))
}

// ---------------------------------------------------------------- 8

fn gradient_health() -> Outcome {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "model.hidden_dim=8",
        "model.num_queries=4",
        "model.ffn_dim=16",
        "data.image_size=16",
        "qpa.enabled=false",
        "pseudo.enabled=false",
        "vq.enabled=false",
        "loss.deep_supervision=false",
        "loss.class_weight=1",
        "loss.bce_weight=1",
        "loss.dice_weight=1",
        "csl.enabled=true",
        "csl.weight=2.0",
    ])
    .expect("valid overrides");
    let old = [0, 1, 2];
    let seen = [0, 1, 2, 3, 4];
    let mut prev = SegModel::new(&cfg.model, 16, 3, 8, 21);
    prev.set_prototypes(PrototypeSet { vectors: pseudo_random_tensor(3, 8, 22), class_ids: old.to_vec(), stage_of: vec![1; 3] });
    let model = SegModel::new(&cfg.model, 16, 3, 8, 23);
    let world = cfg.shape_world();
    let index = (0..200).find(|&i| generate(&world, i).1.classes().iter().any(|c| seen.contains(c))).expect("an image with a seen class");
    let (image, full) = generate(&world, index);
    let item = Item { index, annotation: stage_view(&full, &seen.iter().copied().collect()), image };
    let cache = previous_model_cache(&prev, &cfg, &old, &item.image).expect("teacher");
    if cache.teacher.is_none() {
        return outcome(false, "no CSL teacher");
    }
    let loss_fn = |store: &contiseg::autograd::ParamStore| {
        let mut m = model.clone();
        m.params = store.clone();
        let mut g = Graph::new();
        let (loss, _, _) = build_loss(&mut g, &m, &cfg, &seen, &old, &item, Some(&cache), None).expect("loss");
        (g, loss)
    };
    let (g, l) = loss_fn(&model.params);
    let value = g.value(l).item();
    let report = check_param_gradients(&model.params, &loss_fn, DEFAULT_EPS, 12);
    let rel = report.max_rel_err_above(GRAD_FLOOR);
    let pass = rel <= GRAD_REL_TOL && value.is_finite();
    outcome(pass, format!("loss {value:.4}; {} coords; max rel err {rel:.2e} (max abs err {:.1e})", report.checked, report.max_abs_err))
}

// ---------------------------------------------------------------- 9

fn toy_config(seed: u64) -> Config {
    let mut cfg = Config::default();
    cfg.apply_overrides(TOY).expect("valid toy overrides");
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg
}

struct Method {
    name: &'static str,
    components: (bool, bool, bool, bool),
}

const METHODS: [Method; 4] = [
    Method { name: "FT", components: (false, false, false, false) },
    Method { name: "Psd", components: (true, false, false, false) },
    Method { name: "Psd+QPA+CSL", components: (true, true, true, false) },
    Method { name: "full", components: (true, true, true, true) },
];

fn with(cfg: &Config, m: &Method) -> Config {
    let (a, b, c, d) = m.components;
    cfg.clone().with_components(a, b, c, d)
}

fn run_quiet(cfg: &Config, joint: bool) -> RunRecord {
    let opts = RunOptions::default();
    if joint { run_joint(cfg, &opts) } else { run(cfg, &opts) }.expect("run")
}

fn forgetting_check() -> Outcome {
    let mut ordered = 0;
    let mut ft_ratio = Vec::new();
    let mut full_ratio = Vec::new();
    for seed in 0..SEEDS {
        let cfg = toy_config(seed);
        let base = StagePlan::from_config(&cfg).expect("plan").stages[0].clone();
        let joint_ft = run_quiet(&with(&cfg, &METHODS[0]), true).final_pq_over(&base).unwrap_or(0.0);
        let joint_full = run_quiet(&with(&cfg, &METHODS[3]), true).final_pq_over(&base).unwrap_or(0.0);
        let mut all = Vec::new();
        let mut bases = Vec::new();
        for m in &METHODS {
            let rec = run_quiet(&with(&cfg, m), false);
            all.push(rec.last().and_then(|r| r.pq.all).unwrap_or(0.0));
            bases.push(rec.final_pq_over(&base).unwrap_or(0.0));
        }
        let mono = all.windows(2).all(|w| w[0] < w[1]);
        ordered += usize::from(mono);
        ft_ratio.push(bases[0] / joint_ft);
        full_ratio.push(bases[3] / joint_full);
        let fmt: Vec<String> = METHODS.iter().zip(&all).map(|(m, a)| format!("{} {a:.3}", m.name)).collect();
        println!(
            "    seed {seed}: all-PQ {} (monotone {mono}); base PQ FT {:.3}/joint {joint_ft:.3}, full {:.3}/joint {joint_full:.3}",
            fmt.join(", "),
            bases[0],
            bases[3]
        );
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ft, full) = (mean(&ft_ratio), mean(&full_ratio));
    let pass = ft < 0.3 && full >= 0.7 && ordered >= 4;
    outcome(pass, format!("FT keeps {:.0}% of joint base PQ, full keeps {:.0}%; ordering holds on {ordered}/{SEEDS} seeds", ft * 100.0, full * 100.0))
}

// ---------------------------------------------------------------- 10

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn order_robustness() -> Outcome {
    let mut orders: Vec<Vec<String>> = (0..5).map(|s| vec!["plan.order=shuffle".into(), format!("plan.order_seed={s}")]).collect();
    orders.push(vec!["plan.order=descending".into()]);
    let mut ft = Vec::new();
    let mut full = Vec::new();
    for o in &orders {
        let mut cfg = toy_config(0);
        cfg.apply_overrides(o).expect("valid order");
        ft.push(run_quiet(&with(&cfg, &METHODS[0]), false).last().and_then(|r| r.pq.all).unwrap_or(0.0));
        full.push(run_quiet(&with(&cfg, &METHODS[3]), false).last().and_then(|r| r.pq.all).unwrap_or(0.0));
    }
    let (sf, sv) = (std_dev(&ft), std_dev(&full));
    println!("    FT all-PQ per order {ft:.3?}\n    full all-PQ per order {full:.3?}");
    outcome(sv < 0.5 * sf, format!("std all-PQ: full {sv:.4} vs FT {sf:.4} (need < {:.4})", 0.5 * sf))
}

// ---------------------------------------------------------------- 11

fn storage_accounting() -> Outcome {
    let mut bank = VirtualQueryBank::new(20, 64);
    for c in 0..16 {
        for k in 0..25 {
            bank.push(c, &vec![k as f64; 64]).expect("finite");
        }
    }
    let payload = bank_payload_bytes(&bank, 4);
    let closed = vq_capacity_bytes(20, 16, 64, 4);
    let dir = tempfile::tempdir().expect("temp dir");
    let images: Vec<Image> = (0..7).map(|i| generate(&Config::default().shape_world(), i).0).collect();
    let written = write_image_replay(dir.path(), &images).expect("write");
    let (n, on_disk) = image_replay_dir_bytes(dir.path()).expect("read");
    let reference = ReferenceScale::default();
    let ratio = reference.ratio();
    let pass = payload == 81_920
        && closed == 81_920
        && written == image_replay_bytes(7, 32, 32, 3)
        && (n, on_disk) == (7, 7 * 3072)
        && reference.vq_bytes() == 6_144_000
        && (ratio - 0.27).abs() <= 0.10;
    outcome(
        pass,
        format!("bank {payload} B (closed form {closed}); replay {n} images {on_disk} B; reference VQ/image = {:.1}%", ratio * 100.0),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let long = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check, Option<Duration>, bool); 11] = [
        ("skip-attention isolation", skip_attention_isolation, Some(MINUTE), false),
        ("gradient barrier", gradient_barrier, Some(MINUTE), false),
        ("top-K oracle equivalence", topk_oracle, Some(MINUTE), false),
        ("Hungarian optimality", hungarian_optimality, Some(MINUTE), false),
        ("CSL correctness", csl_correctness, Some(MINUTE), false),
        ("pseudo-distribution", pseudo_distribution, Some(MINUTE), false),
        ("metric correctness", metric_correctness, Some(2 * MINUTE), false),
        ("gradient health", gradient_health, Some(2 * MINUTE), false),
        ("end-to-end forgetting", forgetting_check, None, true),
        ("order robustness", order_robustness, None, true),
        ("storage accounting", storage_accounting, None, false),
    ];
    let mut failed = 0;
    for (i, (name, check, budget, slow)) in criteria.iter().enumerate() {
        if *slow && !long {
            println!("criterion {:>2} SKIP  {name}: long run, pass --include-ignored", i + 1);
            continue;
        }
        let start = Instant::now();
        let out = check();
        let took = start.elapsed();
        let in_time = budget.is_none_or(|b| took <= b);
        let pass = out.pass && in_time;
        failed += usize::from(!pass);
        let verdict = if pass { "PASS" } else { "FAIL" };
        let late = if in_time { String::new() } else { " (over time budget)".into() };
        println!("criterion {:>2} {verdict}  {name}: {} [{:.1}s{late}]", i + 1, out.detail, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
