use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Extraction, RunConfig};
use crate::contrast::{contrast_on_tape, pair_schedule, PairMode};
use crate::diffcore::{Tape, Tensor, Var};
use crate::maskio::{downsample_mask, make_patch_grid, RegionMask, IGNORE_ID};
use crate::nets::{
    adam_step, aux_map_forward, backbone_forward, init_params, load_checkpoint, save_checkpoint,
    task_to_adapter_input, AdapterValue, ModelParams, OptimState, ParamVars, Predictions,
};
use crate::par::Executor;
use crate::supervision::{
    argmax_classes, depth_l1_loss, normal_cosine_loss, seg_ce_loss, MetricAccumulator,
};
use crate::synthworld::{
    assign_labels, draw_label_sets, generate_dataset, read_dataset, write_dataset, LabelSetting,
    Scene, WorldConfig,
};
use crate::task::{Task, TaskSet};
use crate::{Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BATCHES_FILE: &str = "batches.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.rdc";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_HEADER: &str =
    "epoch,split,miou,aerr,merr,loss_sup,loss_rc,regions_used,regions_skipped";
pub const BATCHES_HEADER: &str = "epoch,batch,total,loss_sup,loss_rc";

/// Independent random streams of one run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init = 1,
    Labels = 2,
    Shuffle = 3,
    Pixel = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b))
}

/// Seed of `stream` under the run seed `seed`.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    mix(seed, stream as u64)
}

/// Number of training scenes; the last fifth (by index) is validation.
pub fn split_point(count: usize) -> usize {
    count - count / 5
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub miou: f64,
    pub aerr: f64,
    /// Degrees.
    pub merr: f64,
    pub loss_sup: f64,
    pub loss_rc: f64,
    pub regions_used: usize,
    pub regions_skipped: usize,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
            self.epoch,
            self.split,
            self.miou,
            self.aerr,
            self.merr,
            self.loss_sup,
            self.loss_rc,
            self.regions_used,
            self.regions_skipped
        )
    }
}

/// Batch-mean losses; `total = loss_sup + lambda_rc * loss_rc`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    pub total: f64,
    pub loss_sup: f64,
    pub loss_rc: f64,
}

impl BatchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.batch, self.total, self.loss_sup, self.loss_rc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub batches: Vec<BatchRecord>,
    pub params: ModelParams,
}

fn term_error(batch: usize, term: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("batch {batch}, term {term}: {m}")),
        other => other,
    }
}

/// Contrast regions of `scene` at half resolution: its region mask or a
/// patch grid, per `cfg.extraction`.
pub fn feature_mask(cfg: &RunConfig, scene: &Scene) -> Result<RegionMask> {
    let (fh, fw) = (scene.height() / 2, scene.width() / 2);
    match cfg.extraction {
        Extraction::Region => downsample_mask(&scene.regions, fh, fw),
        Extraction::Patch => make_patch_grid(fh, fw, cfg.patch_size.height, cfg.patch_size.width),
    }
}

fn supervised_loss(tape: &mut Tape, pred: &Predictions, task: Task, scene: &Scene) -> Result<Var> {
    let valid = vec![true; scene.height() * scene.width()];
    match task {
        Task::Segmentation => seg_ce_loss(tape, pred.seg, &scene.seg, IGNORE_ID),
        Task::Depth => depth_l1_loss(tape, pred.depth, scene.depth.data(), &valid),
        Task::Normal => normal_cosine_loss(tape, pred.normal, scene.normals.data(), &valid),
    }
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &v in vars {
        acc = Some(match acc {
            None => v,
            Some(a) => tape.add(a, v)?,
        });
    }
    Ok(acc)
}

fn prediction_metrics(
    tape: &Tape,
    pred: &Predictions,
    scene: &Scene,
    num_classes: usize,
) -> Result<MetricAccumulator> {
    let mut acc = MetricAccumulator::new(num_classes);
    let classes = argmax_classes(tape.value(pred.seg))?;
    acc.add_segmentation(&classes, &scene.seg, IGNORE_ID)?;
    acc.add_depth(tape.value(pred.depth).data(), scene.depth.data(), None)?;
    acc.add_normals(tape.value(pred.normal).data(), scene.normals.data(), None)?;
    Ok(acc)
}

fn label_input(tape: &mut Tape, task: Task, scene: &Scene, num_classes: usize) -> Result<Var> {
    let value = match task {
        Task::Segmentation => AdapterValue::SegLabel {
            classes: &scene.seg,
            num_classes,
            height: scene.height(),
            width: scene.width(),
        },
        Task::Depth => AdapterValue::DenseLabel(&scene.depth),
        Task::Normal => AdapterValue::DenseLabel(&scene.normals),
    };
    task_to_adapter_input(tape, task, value)
}

struct ItemResult {
    grads: Vec<Vec<f64>>,
    total: f64,
    loss_sup: f64,
    loss_rc: f64,
    regions_used: usize,
    regions_skipped: usize,
    metrics: MetricAccumulator,
}

/// One scene of a training batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub scene: &'a Scene,
    /// Tasks whose labels are visible.
    pub labeled: TaskSet,
    /// Contrast regions at feature resolution, from [`feature_mask`].
    pub mask: &'a RegionMask,
    /// Seed of the pixel-strategy negative draw.
    pub pixel_seed: u64,
}

struct ItemGraph {
    pred: Predictions,
    sup: Var,
    rc: Option<(Var, usize, usize)>,
    total: Var,
}

/// Records the full loss of one training scene on `tape`.
fn item_graph(
    tape: &mut Tape,
    pv: &ParamVars,
    num_classes: usize,
    cfg: &RunConfig,
    item: &BatchItem<'_>,
    batch: usize,
) -> Result<ItemGraph> {
    let scene = item.scene;
    let image = tape.constant(scene.image.clone());
    let pred = backbone_forward(tape, pv, image).map_err(|e| term_error(batch, "forward", e))?;
    let sup_terms = item
        .labeled
        .tasks()
        .map(|t| supervised_loss(tape, &pred, t, scene))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| term_error(batch, "loss_sup", e))?;
    let sup = match sum_vars(tape, &sup_terms)? {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let mut total = sup;
    let mut rc = None;
    if cfg.lambda_rc > 0.0 {
        rc = contrast_terms(tape, pv, cfg, item, num_classes, &pred)
            .map_err(|e| term_error(batch, "loss_rc", e))?;
        if let Some((v, _, _)) = rc {
            let weighted = tape.scale(v, cfg.lambda_rc)?;
            total = tape.add(sup, weighted)?;
        }
    }
    Ok(ItemGraph {
        pred,
        sup,
        rc,
        total,
    })
}

/// Forward, losses and parameter gradients of one training scene.
fn train_item(
    params: &ModelParams,
    cfg: &RunConfig,
    item: &BatchItem<'_>,
    batch: usize,
) -> Result<ItemResult> {
    let num_classes = params.num_classes();
    let mut tape = Tape::new();
    let pv = params.to_tape(&mut tape, true);
    let g = item_graph(&mut tape, &pv, num_classes, cfg, item, batch)?;
    let metrics = prediction_metrics(&tape, &g.pred, item.scene, num_classes)?;
    let total = tape.value(g.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch {batch}, term total: {total}"
        )));
    }
    tape.backward(g.total)
        .map_err(|e| term_error(batch, "backward", e))?;
    let grads = pv.grads(&tape);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("batch {batch}, term gradient")));
    }
    let (loss_rc, regions_used, regions_skipped) = match g.rc {
        Some((v, u, s)) => (tape.value(v).item(), u, s),
        None => (0.0, 0, 0),
    };
    Ok(ItemResult {
        grads,
        total,
        loss_sup: tape.value(g.sup).item(),
        loss_rc,
        regions_used,
        regions_skipped,
        metrics,
    })
}

/// Total training loss of `item` with parameter tensor `index` read from
/// `x` and every other tensor held constant, for gradient checks.
pub fn item_loss_wrt(
    tape: &mut Tape,
    params: &ModelParams,
    index: usize,
    x: Var,
    cfg: &RunConfig,
    item: &BatchItem<'_>,
) -> Result<Var> {
    if index >= params.tensors().len() || tape.value(x).shape() != params.tensors()[index].shape() {
        return Err(Error::InvalidArgument(format!(
            "no parameter tensor {index} of the given shape"
        )));
    }
    let mut pv = params.to_tape(tape, false);
    pv.replace(index, x);
    Ok(item_graph(tape, &pv, params.num_classes(), cfg, item, 0)?.total)
}

/// Batch-mean gradient and losses, region counts summed over items, and
/// training metrics of the predictions made along the way.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub grads: Vec<Vec<f64>>,
    pub total: f64,
    pub loss_sup: f64,
    pub loss_rc: f64,
    pub regions_used: usize,
    pub regions_skipped: usize,
    pub metrics: MetricAccumulator,
}

/// Gradients of every item on `exec`, reduced in item order so the result
/// does not depend on the thread count. `batch_index` labels non-finite
/// errors.
pub fn batch_gradient(
    params: &ModelParams,
    cfg: &RunConfig,
    items: &[BatchItem<'_>],
    batch_index: usize,
    exec: &Executor,
) -> Result<BatchGradient> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let results = exec.map(items, |_, item| train_item(params, cfg, item, batch_index));
    let inv = 1.0 / items.len() as f64;
    let mut out = BatchGradient {
        grads: params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.len()])
            .collect(),
        total: 0.0,
        loss_sup: 0.0,
        loss_rc: 0.0,
        regions_used: 0,
        regions_skipped: 0,
        metrics: MetricAccumulator::new(params.num_classes()),
    };
    for r in results {
        let r = r?;
        for (g, rg) in out.grads.iter_mut().zip(&r.grads) {
            g.iter_mut().zip(rg).for_each(|(a, b)| *a += b);
        }
        out.total += r.total;
        out.loss_sup += r.loss_sup;
        out.loss_rc += r.loss_rc;
        out.regions_used += r.regions_used;
        out.regions_skipped += r.regions_skipped;
        out.metrics.merge(&r.metrics)?;
    }
    out.grads.iter_mut().flatten().for_each(|g| *g *= inv);
    out.total *= inv;
    out.loss_sup *= inv;
    out.loss_rc *= inv;
    Ok(out)
}

/// Mean contrast over the scheduled pairs, with region counts summed over
/// pairs. `None` when no pair is scheduled.
fn contrast_terms(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &RunConfig,
    item: &BatchItem<'_>,
    num_classes: usize,
    pred: &Predictions,
) -> Result<Option<(Var, usize, usize)>> {
    let k = Task::ALL.len();
    let mode = if cfg.setting == LabelSetting::Full {
        PairMode::Full
    } else {
        PairMode::Partial
    };
    let pairs = pair_schedule(item.labeled, item.labeled.complement(k), mode)?;
    let mut label_maps: [Option<Var>; 3] = [None; 3];
    let mut pred_maps: [Option<Var>; 3] = [None; 3];
    let (mut terms, mut used, mut skipped) = (Vec::with_capacity(pairs.len()), 0, 0);
    for (p, &(s, t)) in pairs.iter().enumerate() {
        let (ts, tt) = (Task::from_index(s)?, Task::from_index(t)?);
        let ms = match label_maps[s] {
            Some(v) => v,
            None => {
                let input = label_input(tape, ts, item.scene, num_classes)?;
                *label_maps[s].insert(aux_map_forward(tape, pv, ts, input)?)
            }
        };
        let mt = match pred_maps[t] {
            Some(v) => v,
            None => {
                let input =
                    task_to_adapter_input(tape, tt, AdapterValue::Prediction(pred.get(tt)))?;
                *pred_maps[t].insert(aux_map_forward(tape, pv, tt, input)?)
            }
        };
        let ccfg = cfg.contrast_config(mix(item.pixel_seed, p as u64));
        let (v, report) = contrast_on_tape(tape, ms, mt, item.mask, &ccfg)?;
        used += report.regions_used;
        skipped += report.regions_skipped;
        terms.push(v);
    }
    let n = terms.len();
    Ok(match sum_vars(tape, &terms)? {
        Some(sum) => Some((tape.scale(sum, 1.0 / n as f64)?, used, skipped)),
        None => None,
    })
}

/// Metrics and mean all-task supervised loss of `params` on `scenes`,
/// without gradient work.
pub fn evaluate_scenes(
    params: &ModelParams,
    scenes: &[Scene],
    exec: &Executor,
) -> Result<(MetricAccumulator, f64)> {
    let num_classes = params.num_classes();
    let per_scene = exec.map(scenes, |_, scene| -> Result<(MetricAccumulator, f64)> {
        let mut tape = Tape::new();
        let pv = params.to_tape(&mut tape, false);
        let image = tape.constant(scene.image.clone());
        let pred = backbone_forward(&mut tape, &pv, image)?;
        let acc = prediction_metrics(&tape, &pred, scene, num_classes)?;
        let mut loss = 0.0;
        for task in Task::ALL {
            let v = supervised_loss(&mut tape, &pred, task, scene)?;
            loss += tape.value(v).item();
        }
        Ok((acc, loss))
    });
    let mut acc = MetricAccumulator::new(num_classes);
    let mut loss = 0.0;
    for r in per_scene {
        let (a, l) = r?;
        acc.merge(&a)?;
        loss += l;
    }
    let mean = if scenes.is_empty() {
        0.0
    } else {
        loss / scenes.len() as f64
    };
    Ok((acc, mean))
}

fn val_record(epoch: usize, acc: &MetricAccumulator, loss_sup: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        split: Split::Val,
        miou: acc.miou().unwrap_or(f64::NAN),
        aerr: acc.aerr().unwrap_or(f64::NAN),
        merr: acc.merr().unwrap_or(f64::NAN),
        loss_sup,
        loss_rc: 0.0,
        regions_used: 0,
        regions_skipped: 0,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn csv_text<'a>(header: &str, rows: impl Iterator<Item = String> + 'a) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

/// Trains one model and writes `config.txt`, `metrics.csv` (rewritten
/// after every epoch), `batches.csv` and `checkpoint.rdc` into
/// `cfg.out_dir`. Labels are redrawn from `cfg.setting` and the run seed.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let data = read_dataset(&cfg.data_dir)?;
    let n = data.scenes.len();
    let n_train = split_point(n);
    if n_train == 0 || n_train == n {
        return Err(Error::Data(format!(
            "dataset {} has {n} scenes; need at least 5 for a train/val split",
            cfg.data_dir.display()
        )));
    }
    let (train_scenes, val_scenes) = data.scenes.split_at(n_train);
    let num_classes = data.config.num_classes;
    let labels = draw_label_sets(
        n_train,
        cfg.setting,
        Task::ALL.len(),
        derive_seed(cfg.seed, Stream::Labels),
    )?;
    let masks = train_scenes
        .iter()
        .map(|s| feature_mask(cfg, s))
        .collect::<Result<Vec<_>>>()?;

    let mut params = init_params(derive_seed(cfg.seed, Stream::Init), num_classes)?;
    let mut opt = OptimState::new(params.tensors(), cfg.lr);
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_text())?;

    let exec = Executor::with_threads(cfg.threads);
    let mut shuffle = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, Stream::Shuffle));
    let pixel_base = derive_seed(cfg.seed, Stream::Pixel);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut records = Vec::with_capacity(2 * cfg.epochs);
    let mut batches = Vec::new();
    let mut batch_index = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let epoch_seed = mix(pixel_base, epoch as u64);
        let mut acc = MetricAccumulator::new(num_classes);
        let (mut sup_sum, mut rc_sum, mut used, mut skipped) = (0.0, 0.0, 0, 0);
        for chunk in order.chunks(cfg.batch) {
            let items: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    scene: &train_scenes[i],
                    labeled: labels[i],
                    mask: &masks[i],
                    pixel_seed: mix(epoch_seed, i as u64),
                })
                .collect();
            let b = batch_gradient(&params, cfg, &items, batch_index, &exec)?;
            acc.merge(&b.metrics)?;
            used += b.regions_used;
            skipped += b.regions_skipped;
            sup_sum += b.loss_sup * items.len() as f64;
            rc_sum += b.loss_rc * items.len() as f64;
            batches.push(BatchRecord {
                epoch,
                batch: batch_index,
                total: b.total,
                loss_sup: b.loss_sup,
                loss_rc: b.loss_rc,
            });
            adam_step(params.tensors_mut(), &b.grads, &mut opt)?;
            batch_index += 1;
        }
        let inv = 1.0 / n_train as f64;
        records.push(EpochRecord {
            epoch,
            split: Split::Train,
            miou: acc.miou().unwrap_or(f64::NAN),
            aerr: acc.aerr().unwrap_or(f64::NAN),
            merr: acc.merr().unwrap_or(f64::NAN),
            loss_sup: sup_sum * inv,
            loss_rc: rc_sum * inv,
            regions_used: used,
            regions_skipped: skipped,
        });
        let (vacc, vloss) = evaluate_scenes(&params, val_scenes, &exec)?;
        records.push(val_record(epoch, &vacc, vloss));
        write_text(
            &cfg.out_dir.join(METRICS_FILE),
            &csv_text(METRICS_HEADER, records.iter().map(EpochRecord::csv_row)),
        )?;
    }
    write_text(
        &cfg.out_dir.join(BATCHES_FILE),
        &csv_text(BATCHES_HEADER, batches.iter().map(BatchRecord::csv_row)),
    )?;
    save_checkpoint(&params, &cfg.out_dir.join(CHECKPOINT_FILE))?;
    Ok(TrainOutcome {
        records,
        batches,
        params,
    })
}

/// Epoch count from the `config.txt` written next to a checkpoint, if any.
fn checkpoint_epochs(checkpoint: &Path) -> usize {
    let Some(dir) = checkpoint.parent() else {
        return 0;
    };
    let Ok(text) = fs::read_to_string(dir.join(CONFIG_FILE)) else {
        return 0;
    };
    text.lines()
        .filter_map(|l| l.split_once('='))
        .find(|(k, _)| k.trim() == "epochs")
        .and_then(|(_, v)| v.trim().parse().ok())
        .unwrap_or(0)
}

/// Validation metrics of a saved checkpoint. The epoch column comes from the
/// run's `config.txt` when it sits beside the checkpoint, else 0.
pub fn evaluate(checkpoint: &Path, data_dir: &Path, threads: usize) -> Result<EpochRecord> {
    let params = load_checkpoint(checkpoint)?;
    let data = read_dataset(data_dir)?;
    if data.config.num_classes != params.num_classes() {
        return Err(Error::Data(format!(
            "checkpoint {} has {} classes but dataset {} has {}",
            checkpoint.display(),
            params.num_classes(),
            data_dir.display(),
            data.config.num_classes
        )));
    }
    let n_train = split_point(data.scenes.len());
    let exec = Executor::with_threads(threads);
    let (acc, loss) = evaluate_scenes(&params, &data.scenes[n_train..], &exec)?;
    Ok(val_record(checkpoint_epochs(checkpoint), &acc, loss))
}

/// Generates `count` scenes, assigns labels under `setting` and writes the
/// dataset to `dir`.
pub fn generate(
    world: &WorldConfig,
    count: usize,
    setting: LabelSetting,
    dir: &Path,
    exec: &Executor,
) -> Result<()> {
    let mut scenes = generate_dataset(world, count, exec)?;
    assign_labels(
        &mut scenes,
        setting,
        derive_seed(world.seed, Stream::Labels),
    )?;
    write_dataset(&scenes, world, dir)
}
