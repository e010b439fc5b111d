//! Stage plans, stage datasets, and the continual training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::config::{Config, OrderMode, SelectionTargets};
use crate::csl::{self, CslTeacher};
use crate::data::{generate, stage_view, Annotation, ClassId, Image, ShapeWorldConfig};
use crate::error::{Error, Result};
use crate::matching::{fuse_pseudo_labels, hungarian_match, set_criterion, targets_from, CostWeights};
use crate::metrics::{group_report, mean, GroupReport, IouAccumulator, PqAccumulator};
use crate::model::{ForwardSpec, SegModel, PROTOTYPES};
use crate::optim::{clip_grad_norm, step_lr, AdamW};
use crate::panoptic::{label_map, panoptic_inference, InferenceParams, PanopticSegment};
use crate::par::Exec;
use crate::qpa::{concat_prototypes, point_labels, prototype_selection_loss, PrototypeInit};
use crate::vq_bank::{pseudo_counts, pseudo_weights, sample_virtual, virtual_class_loss, VirtualQueryBank, VirtualSample};

pub fn make_order(classes: &[ClassId], mode: OrderMode, seed: u64) -> Vec<ClassId> {
    let mut order = classes.to_vec();
    match mode {
        OrderMode::Ascending => order.sort_unstable(),
        OrderMode::Descending => order.sort_unstable_by(|a, b| b.cmp(a)),
        OrderMode::Shuffle => {
            order.sort_unstable();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    /// Classes introduced at each stage; stage `t` is `stages[t - 1]`.
    pub stages: Vec<Vec<ClassId>>,
    pub iterations: Vec<usize>,
    pub learning_rates: Vec<f64>,
}

impl StagePlan {
    /// `base` classes first, then `increment` per stage.
    pub fn split(order: &[ClassId], base: usize, increment: usize) -> Result<Vec<Vec<ClassId>>> {
        if base == 0 || base > order.len() {
            return Err(Error::Config(format!("base split {base} does not fit {} classes", order.len())));
        }
        let rest = order.len() - base;
        if rest > 0 && (increment == 0 || !rest.is_multiple_of(increment)) {
            return Err(Error::Config(format!("{rest} remaining classes are not a multiple of increment {increment}")));
        }
        let mut stages = vec![order[..base].to_vec()];
        stages.extend(order[base..].chunks(increment.max(1)).map(<[ClassId]>::to_vec));
        Ok(stages)
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let classes: Vec<ClassId> = (0..cfg.data.num_classes as ClassId).collect();
        let order = make_order(&classes, cfg.plan.order, cfg.plan.order_seed);
        let stages = Self::split(&order, cfg.plan.base_classes, cfg.plan.increment)?;
        let iterations = stages
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 { cfg.plan.base_iters } else { cfg.plan.iters_per_class * s.len() })
            .collect();
        let learning_rates = (0..stages.len()).map(|i| if i == 0 { cfg.plan.lr_base } else { cfg.plan.lr_incremental }).collect();
        Ok(Self { stages, iterations, learning_rates })
    }

    /// A single stage with every class and the incremental plan's total
    /// iteration budget.
    pub fn joint(cfg: &Config) -> Result<Self> {
        let incremental = Self::from_config(cfg)?;
        Ok(Self {
            stages: vec![incremental.stages.concat()],
            iterations: vec![incremental.iterations.iter().sum()],
            learning_rates: vec![cfg.plan.lr_base],
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Classes of stages `1..=t`.
    pub fn seen(&self, t: usize) -> Vec<ClassId> {
        self.stages[..t].concat()
    }

    pub fn new_classes(&self, t: usize) -> &[ClassId] {
        &self.stages[t - 1]
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub index: u64,
    pub image: Image,
    pub annotation: Annotation,
}

/// Train and test index ranges over the shape generator.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub world: ShapeWorldConfig,
    pub train: Range<u64>,
    pub test: Range<u64>,
}

impl Dataset {
    pub fn from_config(cfg: &Config) -> Self {
        let n = cfg.data.train_images as u64;
        Self { world: cfg.shape_world(), train: 0..n, test: n..n + cfg.data.test_images as u64 }
    }

    /// D^t: training images containing a class of `visible`, with
    /// annotations restricted to `visible`.
    pub fn stage_data(&self, visible: &BTreeSet<ClassId>) -> StageData {
        let items = self
            .train
            .clone()
            .filter_map(|index| {
                let (image, full) = generate(&self.world, index);
                let annotation = stage_view(&full, visible);
                (!annotation.segments.is_empty()).then_some(Item { index, image, annotation })
            })
            .collect();
        StageData { visible: visible.clone(), items, accessed: Mutex::new(Vec::new()) }
    }

    /// Test images with annotations restricted to `seen`.
    pub fn test_items(&self, seen: &BTreeSet<ClassId>) -> Vec<Item> {
        self.test
            .clone()
            .map(|index| {
                let (image, full) = generate(&self.world, index);
                Item { index, image, annotation: stage_view(&full, seen) }
            })
            .collect()
    }
}

/// A stage's training data. Every read is logged so the stage can prove it
/// touched only its own images and labels.
#[derive(Debug)]
pub struct StageData {
    pub visible: BTreeSet<ClassId>,
    items: Vec<Item>,
    accessed: Mutex<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessAudit {
    pub reads: usize,
    pub distinct_images: usize,
}

impl StageData {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Image indices of the stage, without reading the images.
    pub fn indices(&self) -> Vec<u64> {
        self.items.iter().map(|it| it.index).collect()
    }

    pub fn get(&self, k: usize) -> &Item {
        let item = &self.items[k];
        self.accessed.lock().expect("audit log").push(item.index);
        item
    }

    /// Re-derives every image that was read from the generator and checks
    /// it belongs to D^t and that its labels stay within the visible set.
    pub fn audit(&self, world: &ShapeWorldConfig, train: &Range<u64>) -> Result<AccessAudit> {
        let log = self.accessed.lock().expect("audit log");
        let distinct: BTreeSet<u64> = log.iter().copied().collect();
        let by_index: BTreeMap<u64, &Item> = self.items.iter().map(|i| (i.index, i)).collect();
        for &index in &distinct {
            let violation = |m: String| Err(Error::InvalidArgument(format!("data isolation violated: {m}")));
            if !train.contains(&index) {
                return violation(format!("image {index} is not a training image"));
            }
            let (_, full) = generate(world, index);
            if full.classes().is_disjoint(&self.visible) {
                return violation(format!("image {index} has no class of this stage"));
            }
            let Some(item) = by_index.get(&index) else {
                return violation(format!("image {index} is not in the stage set"));
            };
            if let Some(c) = item.annotation.classes().difference(&self.visible).next() {
                return violation(format!("image {index} exposes label {c}"));
            }
        }
        Ok(AccessAudit { reads: log.len(), distinct_images: distinct.len() })
    }
}

/// What the frozen previous model says about one training image.
#[derive(Clone, Debug, Default)]
pub struct PrevCache {
    pub segments: Vec<PanopticSegment>,
    pub teacher: Option<CslTeacher>,
}

#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    pub grads: BTreeMap<String, crate::tensor::Tensor>,
    pub loss: f64,
    pub terms: BTreeMap<&'static str, f64>,
    /// Final-layer vectors of matched queries with their ground-truth class.
    pub matched: Vec<(Vec<f64>, ClassId)>,
}

fn forward_spec<'a>(cfg: &Config, model: &SegModel, visible: &'a [ClassId], virt: Option<&'a crate::tensor::Tensor>) -> ForwardSpec<'a> {
    ForwardSpec {
        visible,
        qpa: cfg.qpa.enabled && !model.proto_classes.is_empty(),
        stop_gradient: cfg.qpa.stop_gradient,
        virtual_queries: virt,
    }
}

fn inference_params(cfg: &Config, score_threshold: f64) -> InferenceParams {
    InferenceParams { score_threshold, overlap_threshold: cfg.eval.overlap_threshold }
}

pub fn previous_model_cache(prev: &SegModel, cfg: &Config, old: &[ClassId], image: &Image) -> Result<PrevCache> {
    let pred = prev.predict(image, &forward_spec(cfg, prev, old, None))?;
    let segments = panoptic_inference(&pred.class_logits, &pred.mask_logits, old, inference_params(cfg, cfg.pseudo.threshold));
    let teacher = if cfg.csl.enabled && !prev.proto_classes.is_empty() {
        Some(csl::previous_stage_selection(&pred.features, &prev.prototype_set(), cfg.model.num_queries)?)
    } else {
        None
    };
    Ok(PrevCache { segments, teacher })
}

/// Loss and parameter gradients for one image.
pub fn train_step(
    model: &SegModel,
    cfg: &Config,
    seen: &[ClassId],
    old: &[ClassId],
    item: &Item,
    prev: Option<&PrevCache>,
    virt: Option<&VirtualSample>,
) -> Result<StepOutput> {
    let mut g = Graph::new();
    let (loss, terms, matched) = build_loss(&mut g, model, cfg, seen, old, item, prev, virt)?;
    let grads = g.backward(loss).params;
    Ok(StepOutput { grads, loss: g.value(loss).item(), terms, matched })
}

/// Builds the total training loss of one image on `g`.
#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
pub fn build_loss(
    g: &mut Graph,
    model: &SegModel,
    cfg: &Config,
    seen: &[ClassId],
    old: &[ClassId],
    item: &Item,
    prev: Option<&PrevCache>,
    virt: Option<&VirtualSample>,
) -> Result<(Var, BTreeMap<&'static str, f64>, Vec<(Vec<f64>, ClassId)>)> {
    let annotation = match prev {
        Some(p) if cfg.pseudo.enabled => fuse_pseudo_labels(&item.annotation, &p.segments, old, cfg.pseudo.threshold),
        _ => item.annotation.clone(),
    };
    let virt = virt.filter(|v| !v.is_empty());
    let spec = forward_spec(cfg, model, seen, virt.map(|v| &v.queries));
    let out = model.forward(g, &item.image, &spec)?;
    let targets = targets_from(&annotation, seen);
    let weights = CostWeights { class: cfg.loss.class_weight, bce: cfg.loss.bce_weight, dice: cfg.loss.dice_weight };
    let assignment = hungarian_match(g.value(out.class_logits), g.value(out.mask_logits), &targets, weights);
    let crit = set_criterion(g, out.class_logits, out.mask_logits, &targets, &assignment, cfg.loss.no_object_weight);
    let mut parts: Vec<(Var, f64)> = vec![(crit.class, cfg.loss.class_weight)];
    let mut terms = BTreeMap::new();
    terms.insert("class", g.value(crit.class).item());
    if let (Some(b), Some(d)) = (crit.bce, crit.dice) {
        parts.push((b, cfg.loss.bce_weight));
        parts.push((d, cfg.loss.dice_weight));
        terms.insert("mask", g.value(b).item() + g.value(d).item());
    }
    if cfg.loss.deep_supervision {
        let (fh, fw) = *out.features.sizes.last().expect("levels");
        for &(c, m) in &out.aux {
            let m = g.upsample_cols(m, fh, fw);
            let a = hungarian_match(g.value(c), g.value(m), &targets, weights);
            let aux = set_criterion(g, c, m, &targets, &a, cfg.loss.no_object_weight);
            parts.push((aux.class, cfg.loss.class_weight));
            if let (Some(b), Some(d)) = (aux.bce, aux.dice) {
                parts.push((b, cfg.loss.bce_weight));
                parts.push((d, cfg.loss.dice_weight));
            }
        }
    }
    if let (Some(v), Some(vl)) = (virt, out.virtual_logits) {
        let l = virtual_class_loss(g, vl, &v.classes, seen)?;
        terms.insert("virtual", g.value(l).item());
        parts.push((l, cfg.loss.class_weight));
    }
    if let Some(sel) = &out.selection {
        let row_of = |c: ClassId| model.proto_classes.iter().position(|&p| p == c);
        let (points, proto_targets): (Var, Vec<Option<usize>>) = match cfg.qpa.selection_targets {
            SelectionTargets::Matched => {
                let t = (0..sel.len()).map(|k| assignment.gt_for_query(k).and_then(|t| row_of(seen[targets[t].label]))).collect();
                (g.gather_rows(out.features.omega, &sel.flat), t)
            }
            SelectionTargets::Dense => {
                let labels = point_labels(&out.features.sizes, &annotation.label_map(), annotation.height, annotation.width);
                (out.features.omega, labels.into_iter().map(|c| c.and_then(row_of)).collect())
            }
        };
        let protos = g.param(&model.params, PROTOTYPES);
        let l = prototype_selection_loss(g, points, protos, &proto_targets)?;
        terms.insert("selection", g.value(l).item());
        parts.push((l, cfg.qpa.selection_loss_weight));
    }
    if cfg.csl.enabled {
        if let Some(teacher) = prev.and_then(|p| p.teacher.as_ref()) {
            let l = csl::csl_loss(g, out.features.omega, teacher)?;
            terms.insert("csl", g.value(l).item());
            parts.push((l, cfg.csl.weight));
        }
    }
    let loss = g.weighted_sum(&parts);
    let finals = g.value(out.final_queries);
    let matched = assignment.pairs.iter().map(|&(q, t)| (finals.row(q).to_vec(), seen[targets[t].label])).collect();
    Ok((loss, terms, matched))
}

#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub pq: PqAccumulator,
    pub iou: IouAccumulator,
}

/// Panoptic predictions over `seen` for every test item, scored against
/// annotations restricted to `seen`.
pub fn evaluate(model: &SegModel, cfg: &Config, items: &[Item], seen: &[ClassId], exec: Exec) -> Result<Evaluation> {
    let seen_set: BTreeSet<ClassId> = seen.iter().copied().collect();
    let per_image = exec.map(items, |item| -> Result<Evaluation> {
        let pred = model.predict(&item.image, &forward_spec(cfg, model, seen, None))?;
        let segs: Vec<_> = panoptic_inference(&pred.class_logits, &pred.mask_logits, seen, inference_params(cfg, cfg.eval.score_threshold))
            .iter()
            .map(PanopticSegment::to_segment)
            .collect();
        let gt = stage_view(&item.annotation, &seen_set);
        let pixels = item.image.height * item.image.width;
        let mut e = Evaluation::default();
        e.pq.add_image(&segs, &gt.segments);
        e.iou.add_image(&label_map(&segs, pixels), &label_map(&gt.segments, pixels));
        Ok(e)
    });
    let mut total = Evaluation::default();
    for e in per_image {
        let e = e?;
        total.pq.merge(&e.pq);
        total.iou.merge(&e.iou);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub classes: Vec<ClassId>,
    pub pq: GroupReport,
    pub miou: GroupReport,
    pub per_class_pq: BTreeMap<ClassId, f64>,
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub train_images: usize,
    pub iterations: usize,
    pub final_loss: f64,
    pub wall_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub stages: Vec<Vec<ClassId>>,
    pub records: Vec<StageRecord>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&StageRecord> {
        self.records.last()
    }

    /// Mean final per-class PQ over `classes` (those that were scored).
    pub fn final_pq_over(&self, classes: &[ClassId]) -> Option<f64> {
        let last = self.last()?;
        mean(classes.iter().filter_map(|c| last.per_class_pq.get(c).copied()))
    }

    /// `stage,group,metric,value` rows; undefined groups read `n/a`.
    pub fn csv(&self) -> String {
        let mut out = String::from("stage,group,metric,value\n");
        for r in &self.records {
            for (metric, report) in [("pq", &r.pq), ("miou", &r.miou)] {
                for (group, v) in report.groups() {
                    let v = v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                    out.push_str(&format!("{},{group},{metric},{v}\n", r.stage));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Where checkpoints, the config snapshot, metrics and the log go. Without
    /// it the run stays in memory.
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
}

pub const CONFIG_SNAPSHOT: &str = "config.txt";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RECORD_JSON: &str = "record.json";
pub const LOG_FILE: &str = "train.log";
/// `index,stage,visible` rows: which images each stage trained on, and under which labels.
pub const DATASET_MANIFEST: &str = "dataset.csv";

fn write_manifest(dir: &Path, t: usize, stage: &StageData) -> Result<()> {
    let path = dir.join(DATASET_MANIFEST);
    let mut text = if t == 1 { String::from("index,stage,visible\n") } else { fs::read_to_string(&path).unwrap_or_default() };
    // a resumed stage replaces its earlier rows
    let prefix = |line: &str| line.split(',').nth(1).and_then(|s| s.parse::<usize>().ok());
    text = text.lines().filter(|l| prefix(l).is_none_or(|s| s < t)).map(|l| format!("{l}\n")).collect();
    let visible: Vec<String> = stage.visible.iter().map(|c| c.to_string()).collect();
    for index in stage.indices() {
        text.push_str(&format!("{index},{t},{}\n", visible.join(" ")));
    }
    fs::write(path, text)?;
    Ok(())
}

fn log_line(dir: Option<&Path>, line: &str) {
    log::info!("{line}");
    if let Some(dir) = dir {
        if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE)) {
            let _ = writeln!(f, "{line}");
        }
    }
}

/// Runs the configured incremental plan.
pub fn run(cfg: &Config, opts: &RunOptions) -> Result<RunRecord> {
    run_plan(cfg, &StagePlan::from_config(cfg)?, opts)
}

/// Offline upper bound: every class in one stage.
pub fn run_joint(cfg: &Config, opts: &RunOptions) -> Result<RunRecord> {
    run_plan(cfg, &StagePlan::joint(cfg)?, opts)
}

pub fn run_plan(cfg: &Config, plan: &StagePlan, opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    let data = Dataset::from_config(cfg);
    let dir = opts.run_dir.as_deref();
    let mut model = SegModel::new(&cfg.model, cfg.data.image_size, 3, cfg.data.num_classes, cfg.seed);
    let mut bank = VirtualQueryBank::new(cfg.vq.queue_len, cfg.model.hidden_dim);
    let mut record = RunRecord { config_hash: cfg.hash(), stages: plan.stages.clone(), records: Vec::new() };
    let mut start = 1;
    if let Some(dir) = dir {
        fs::create_dir_all(dir)?;
        let snapshot = dir.join(CONFIG_SNAPSHOT);
        if opts.resume && snapshot.exists() {
            let prior = Config::load(&snapshot)?;
            if prior.hash() != cfg.hash() {
                return Err(Error::Config("resume with a config that differs from the run's snapshot".into()));
            }
        }
        fs::write(&snapshot, cfg.to_text())?;
        if opts.resume {
            if let Some(done) = checkpoint::latest_stage(dir).filter(|&s| s <= plan.num_stages()) {
                let ckpt = checkpoint::load(&checkpoint::stage_path(dir, done))?;
                model = ckpt.model;
                bank = ckpt.bank;
                let prior: RunRecord = serde_json::from_slice(&fs::read(dir.join(RECORD_JSON))?)?;
                record.records = prior.records.into_iter().filter(|r| r.stage <= done).collect();
                start = done + 1;
                log_line(Some(dir), &format!("resuming after stage {done}"));
            }
        }
    }
    let mut resident_prev: Option<SegModel> = None;
    for t in start..=plan.num_stages() {
        let prev = if t == 1 {
            None
        } else if let Some(dir) = dir {
            let path = checkpoint::stage_path(dir, t - 1);
            if !path.exists() {
                return Err(Error::MissingCheckpoint { stage: t - 1, dir: dir.to_path_buf() });
            }
            Some(checkpoint::load(&path)?.model)
        } else {
            resident_prev.take().or_else(|| Some(model.clone()))
        };
        let started = Instant::now();
        let (train_images, final_loss) = train_stage(cfg, plan, t, &mut model, &mut bank, prev.as_ref(), &data, opts)?;
        let seen = plan.seen(t);
        let test = data.test_items(&seen.iter().copied().collect());
        let eval = evaluate(&model, cfg, &test, &seen, opts.exec)?;
        let per_class_pq = eval.pq.per_class_pq();
        let per_class_iou = eval.iou.per_class_iou();
        let prior_all = |f: fn(&StageRecord) -> Option<f64>| record.records.iter().filter_map(f).collect::<Vec<f64>>();
        let pq = group_report(&per_class_pq, &plan.stages, t, &prior_all(|r| r.pq.all));
        let miou = group_report(&per_class_iou, &plan.stages, t, &prior_all(|r| r.miou.all));
        let ckpt_path = match dir {
            Some(dir) => {
                let path = checkpoint::stage_path(dir, t);
                let ckpt = Checkpoint {
                    stage: t,
                    config: cfg.clone(),
                    seen: seen.clone(),
                    model: model.clone(),
                    bank: bank.clone(),
                    rng_seed: cfg.seed,
                    rng_stream: t as u64,
                };
                checkpoint::save(&path, &ckpt)?;
                Some(path)
            }
            None => None,
        };
        record.records.push(StageRecord {
            stage: t,
            classes: plan.new_classes(t).to_vec(),
            pq,
            miou,
            per_class_pq,
            per_class_iou,
            train_images,
            iterations: plan.iterations[t - 1],
            final_loss,
            wall_secs: started.elapsed().as_secs_f64(),
            checkpoint: ckpt_path,
        });
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.1}", 100.0 * v));
        log_line(
            dir,
            &format!(
                "stage {t}/{}: PQ base {} new {} all {} avg {} ({:.1}s)",
                plan.num_stages(),
                fmt(pq.base),
                fmt(pq.new),
                fmt(pq.all),
                fmt(pq.avg),
                started.elapsed().as_secs_f64()
            ),
        );
        if let Some(dir) = dir {
            fs::write(dir.join(RECORD_JSON), serde_json::to_vec_pretty(&record)?)?;
            fs::write(dir.join(METRICS_CSV), record.csv())?;
        }
        if dir.is_none() {
            resident_prev = Some(model.clone());
        }
    }
    Ok(record)
}

/// Trains stage `t` in place; returns the stage's image count and the
/// mean loss of its last iteration.
#[allow(clippy::too_many_arguments)]
pub fn train_stage(
    cfg: &Config,
    plan: &StagePlan,
    t: usize,
    model: &mut SegModel,
    bank: &mut VirtualQueryBank,
    prev: Option<&SegModel>,
    data: &Dataset,
    opts: &RunOptions,
) -> Result<(usize, f64)> {
    let seen = plan.seen(t);
    let old = plan.seen(t - 1);
    let new = plan.new_classes(t);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(t as u64);
    let grown = concat_prototypes(&model.prototype_set(), new, t, PrototypeInit::Normal { std: cfg.qpa.prototype_init_std }, &mut rng)?;
    model.set_prototypes(grown);

    let stage = data.stage_data(&new.iter().copied().collect());
    if stage.is_empty() {
        return Err(Error::InvalidArgument(format!("stage {t} has no training images")));
    }
    if let Some(dir) = opts.run_dir.as_deref() {
        write_manifest(dir, t, &stage)?;
    }
    let exec = opts.exec;
    let caches: Vec<PrevCache> = match prev {
        Some(p) if cfg.pseudo.enabled || cfg.csl.enabled || cfg.vq.enabled => {
            let idx: Vec<usize> = (0..stage.len()).collect();
            exec.map(&idx, |&k| previous_model_cache(p, cfg, &old, &stage.get(k).image)).into_iter().collect::<Result<_>>()?
        }
        _ => Vec::new(),
    };
    let replay = cfg.vq.enabled && t > 1;
    let weights = if replay {
        let counts = pseudo_counts(&old, caches.iter().map(|c| c.segments.as_slice()), cfg.pseudo.threshold);
        log_line(opts.run_dir.as_deref(), &format!("stage {t}: pseudo counts {counts:?}"));
        pseudo_weights(&counts)
    } else {
        BTreeMap::new()
    };

    let iters = plan.iterations[t - 1];
    let lr0 = plan.learning_rates[t - 1];
    let mut opt = AdamW::new(cfg.plan.weight_decay);
    let frozen = if cfg.qpa.freeze_old_prototypes { BTreeMap::from([(PROTOTYPES.to_string(), old.len())]) } else { BTreeMap::new() };
    let batch = cfg.plan.batch_size;
    let mut last_loss = f64::NAN;
    let mut window: BTreeMap<&'static str, f64> = BTreeMap::new();
    for it in 0..iters {
        let jobs: Vec<(usize, Option<VirtualSample>)> = (0..batch)
            .map(|_| {
                let k = rng.random_range(0..stage.len());
                let v = replay.then(|| sample_virtual(bank, &weights, cfg.vq.num_virtual, &mut rng));
                (k, v)
            })
            .collect();
        let current: &SegModel = model;
        let outs = exec.map(&jobs, |(k, v)| train_step(current, cfg, &seen, &old, stage.get(*k), caches.get(*k), v.as_ref()));
        let mut grads = Gradients::default();
        let mut loss = 0.0;
        let mut matched = Vec::new();
        for out in outs {
            let out = out?;
            loss += out.loss;
            for (k, v) in &out.terms {
                *window.entry(k).or_default() += v / batch as f64;
            }
            grads.accumulate(&Gradients::from_params(out.grads));
            matched.extend(out.matched);
        }
        loss /= batch as f64;
        if !loss.is_finite() || grads.params.values().any(|g| !g.is_finite()) {
            if let Some(dir) = opts.run_dir.as_deref() {
                let ckpt = Checkpoint {
                    stage: t,
                    config: cfg.clone(),
                    seen: seen.clone(),
                    model: model.clone(),
                    bank: bank.clone(),
                    rng_seed: cfg.seed,
                    rng_stream: t as u64,
                };
                checkpoint::save(&dir.join("last-good.ckpt"), &ckpt)?;
            }
            return Err(Error::Aborted { stage: t, iteration: it, reason: format!("non-finite loss {loss}") });
        }
        grads.scale(1.0 / batch as f64);
        clip_grad_norm(&mut grads, cfg.plan.grad_clip);
        let lr = step_lr(lr0, cfg.plan.lr_decay, cfg.plan.lr_milestone, it, iters);
        opt.update(&mut model.params, &grads, lr, &frozen);
        if cfg.vq.enabled {
            for (v, class) in matched {
                bank.push(class, &v)?;
            }
        }
        last_loss = loss;
        if (it + 1) % 100 == 0 || it + 1 == iters {
            let n = (it % 100 + 1) as f64;
            let terms: Vec<String> = window.iter().map(|(k, v)| format!("{k} {:.4}", v / n)).collect();
            log_line(opts.run_dir.as_deref(), &format!("stage {t} iter {}/{iters} loss {loss:.4} [{}]", it + 1, terms.join(", ")));
            window.clear();
        }
    }
    let audit = stage.audit(&data.world, &data.train)?;
    log::debug!("stage {t}: {} reads over {} images", audit.reads, audit.distinct_images);
    Ok((stage.len(), last_loss))
}
