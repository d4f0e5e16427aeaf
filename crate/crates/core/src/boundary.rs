//! Targeted L∞ sign-gradient attacks that stop right at a teacher decision
//! boundary, with Bold Driver step control, plus the one-step "deeper" push.
//!
//! Images live in `[0,1]`; radii and step sizes are given on the 0..255
//! scale and divided by 255 internally.

use rand::Rng;

use crate::dataset::stack_images;
use crate::error::{contract, Error, Result};
use crate::gradcore::{argmax, Mode, Model, Tape, Tensor};

/// Images per teacher pass inside the attack loops.
const PROBE_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f32,
    pub alpha0: f32,
    pub max_iters: usize,
    pub softmax_threshold: f32,
    pub bold_up: f32,
    pub bold_down: f32,
    pub alpha_min: f32,
    /// Start from a uniform random point in the ε-ball.
    pub pgd_init: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 10.0,
            alpha0: 1.0,
            max_iters: 12,
            softmax_threshold: 0.95,
            bold_up: 1.1,
            bold_down: 0.5,
            alpha_min: 0.1,
            pgd_init: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon > 0.0
            && self.alpha_min > 0.0
            && self.alpha_min <= self.alpha0
            && self.alpha0 <= self.epsilon
            && self.bold_up > 1.0
            && self.bold_down > 0.0
            && self.bold_down < 1.0
            && self.softmax_threshold > 0.0
            && self.softmax_threshold <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent attack settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeeperConfig {
    pub epsilon: f32,
    pub alpha: f32,
    pub iters: usize,
}

impl Default for DeeperConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            alpha: 1.0,
            iters: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPair {
    /// Last iterate still outside the target class.
    pub pre: Tensor,
    /// First iterate inside it.
    pub post: Tensor,
    pub origin: Tensor,
    pub target: usize,
    pub pre_pred: usize,
    pub post_pred: usize,
    pub pre_conf: f32,
    pub post_conf: f32,
}

impl BoundaryPair {
    /// The acceptance criteria applied by [`filter_pairs`].
    pub fn is_valid(&self, threshold: f32) -> bool {
        self.post_pred == self.target
            && self.pre_pred != self.target
            && self.pre_conf <= threshold
            && self.post_conf <= threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Still outside the target: accept and grow the step.
    Advance,
    /// Reached the target too confidently: discard and shrink.
    Overshoot,
    /// Reached the target but the iterate before it is too confident.
    PreTooConfident,
    Success,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub alpha: f32,
    pub candidate: Tensor,
    pub pred: usize,
    pub conf: f32,
    pub outcome: Outcome,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    /// Already classified as the target before any step.
    Skipped,
    Failed,
    Kept,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub status: Status,
    pub pair: Option<BoundaryPair>,
    /// The last (current, candidate) pair evaluated, whatever its validity.
    pub last: Option<BoundaryPair>,
    pub iters: usize,
    /// Step size (0..255 scale) when the attack stopped.
    pub final_alpha: f32,
    pub trace: Vec<TraceStep>,
}

/// Teacher view of a set of images: predictions, max-softmax, and
/// optionally the input gradient of cross-entropy towards `targets`.
struct Probe {
    preds: Vec<usize>,
    confs: Vec<f32>,
    grads: Vec<Vec<f32>>,
}

fn max_softmax(row: &[f32]) -> f32 {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let z: f32 = row.iter().map(|&v| (v - m).exp()).sum();
    1.0 / z
}

fn require_eval(teacher: &Model) -> Result<()> {
    if teacher.mode() == Mode::Eval {
        Ok(())
    } else {
        Err(contract("attacks need the teacher in eval mode"))
    }
}

fn probe(teacher: &Model, images: &[&Tensor], targets: &[usize], want_grad: bool) -> Result<Probe> {
    let mut out = Probe {
        preds: Vec::with_capacity(images.len()),
        confs: Vec::with_capacity(images.len()),
        grads: Vec::with_capacity(if want_grad { images.len() } else { 0 }),
    };
    for (imgs, tgts) in images.chunks(PROBE_CHUNK).zip(targets.chunks(PROBE_CHUNK)) {
        let batch = stack_images(imgs)?;
        let per = batch.numel() / imgs.len();
        let mut tape = Tape::new();
        let x = tape.leaf(batch, want_grad);
        let pass = teacher.forward(&mut tape, x, false)?;
        let logits = tape.value(pass.logits);
        for row in logits.rows() {
            out.preds.push(argmax(row));
            out.confs.push(max_softmax(row));
        }
        if want_grad {
            let loss = tape.cross_entropy(pass.logits, tgts)?;
            tape.backward(loss)?;
            let g = tape
                .grad(x)
                .ok_or_else(|| contract("input gradient was not recorded"))?;
            out.grads.extend(g.chunks(per).map(<[f32]>::to_vec));
        }
    }
    Ok(out)
}

fn sign(g: f32) -> f32 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One descent step on the targeted loss, projected onto the ε-ball around
/// `origin` and onto `[0,1]`.
fn project_step(x: &Tensor, grad: &[f32], alpha: f32, origin: &Tensor, epsilon: f32) -> Tensor {
    let (a, e) = (alpha / 255.0, epsilon / 255.0);
    let data = x
        .data()
        .iter()
        .zip(grad)
        .zip(origin.data())
        .map(|((&v, &g), &o)| (v - a * sign(g)).clamp(o - e, o + e).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// A single targeted step `x → clip(x − α·sign ∇CE(x, target))`.
pub fn bim_step(
    teacher: &Model,
    x: &Tensor,
    target: usize,
    alpha: f32,
    origin: &Tensor,
    epsilon: f32,
) -> Result<Tensor> {
    require_eval(teacher)?;
    let p = probe(teacher, &[x], &[target], true)?;
    Ok(project_step(x, &p.grads[0], alpha, origin, epsilon))
}

struct Running {
    origin: Tensor,
    target: usize,
    cur: Tensor,
    cur_grad: Vec<f32>,
    cur_pred: usize,
    cur_conf: f32,
    alpha: f32,
    iters: usize,
    cand: Option<Tensor>,
    last: Option<BoundaryPair>,
    trace: Vec<TraceStep>,
}

/// Attack every `(image, target)` pair together: each loop round costs one
/// teacher forward/backward over the examples still running.
pub fn border_attack_batch<R: Rng + ?Sized>(
    teacher: &Model,
    items: &[(&Tensor, usize)],
    cfg: &AttackConfig,
    record_trace: bool,
    rng: &mut R,
) -> Result<Vec<AttackResult>> {
    require_eval(teacher)?;
    cfg.validate()?;
    let imgs: Vec<&Tensor> = items.iter().map(|&(x, _)| x).collect();
    let targets: Vec<usize> = items.iter().map(|&(_, t)| t).collect();
    let first = probe(teacher, &imgs, &targets, true)?;

    let mut results: Vec<Option<AttackResult>> = vec![None; items.len()];
    let mut running: Vec<(usize, Running)> = Vec::new();
    for (i, grad) in first.grads.into_iter().enumerate() {
        if first.preds[i] == targets[i] {
            results[i] = Some(AttackResult {
                status: Status::Skipped,
                pair: None,
                last: None,
                iters: 0,
                final_alpha: cfg.alpha0,
                trace: Vec::new(),
            });
            continue;
        }
        running.push((
            i,
            Running {
                origin: imgs[i].clone(),
                target: targets[i],
                cur: imgs[i].clone(),
                cur_grad: grad,
                cur_pred: first.preds[i],
                cur_conf: first.confs[i],
                alpha: cfg.alpha0,
                iters: 0,
                cand: None,
                last: None,
                trace: Vec::new(),
            },
        ));
    }

    if cfg.pgd_init && !running.is_empty() {
        let e = cfg.epsilon / 255.0;
        for (_, r) in running.iter_mut() {
            let data = r
                .origin
                .data()
                .iter()
                .map(|&o| (o + rng.gen_range(-e..=e)).clamp(0.0, 1.0))
                .collect();
            r.cur = Tensor::new(r.origin.shape().to_vec(), data)?;
        }
        let starts: Vec<&Tensor> = running.iter().map(|(_, r)| &r.cur).collect();
        let tg: Vec<usize> = running.iter().map(|(_, r)| r.target).collect();
        let mut p = probe(teacher, &starts, &tg, true)?;
        for (k, (_, r)) in running.iter_mut().enumerate() {
            // A start that already lands in the target falls back to the origin.
            if p.preds[k] == r.target {
                r.cur = r.origin.clone();
                continue;
            }
            r.cur_grad = std::mem::take(&mut p.grads[k]);
            r.cur_pred = p.preds[k];
            r.cur_conf = p.confs[k];
        }
    }

    let thr = cfg.softmax_threshold;
    for _ in 0..cfg.max_iters {
        if running.is_empty() {
            break;
        }
        for (_, r) in running.iter_mut() {
            r.cand = Some(project_step(&r.cur, &r.cur_grad, r.alpha, &r.origin, cfg.epsilon));
        }
        let cands: Vec<&Tensor> = running.iter().map(|(_, r)| r.cand.as_ref().unwrap()).collect();
        let tg: Vec<usize> = running.iter().map(|(_, r)| r.target).collect();
        let p = probe(teacher, &cands, &tg, true)?;

        let mut still = Vec::with_capacity(running.len());
        for (k, ((i, mut r), grad)) in running.into_iter().zip(p.grads).enumerate() {
            let cand = r.cand.take().expect("candidate set above");
            let (pred, conf) = (p.preds[k], p.confs[k]);
            r.iters += 1;
            let outcome = if pred != r.target {
                Outcome::Advance
            } else if conf > thr {
                Outcome::Overshoot
            } else if r.cur_conf > thr {
                Outcome::PreTooConfident
            } else {
                Outcome::Success
            };
            let step_alpha = r.alpha;
            if record_trace {
                r.trace.push(TraceStep {
                    alpha: step_alpha,
                    candidate: cand.clone(),
                    pred,
                    conf,
                    outcome,
                });
            }
            let pair = BoundaryPair {
                pre: r.cur.clone(),
                post: cand.clone(),
                origin: r.origin.clone(),
                target: r.target,
                pre_pred: r.cur_pred,
                post_pred: pred,
                pre_conf: r.cur_conf,
                post_conf: conf,
            };
            match outcome {
                Outcome::Advance => {
                    r.cur = cand;
                    r.cur_grad = grad;
                    r.cur_pred = pred;
                    r.cur_conf = conf;
                    r.alpha = (r.alpha * cfg.bold_up).min(cfg.epsilon);
                    r.last = Some(pair);
                }
                Outcome::Overshoot | Outcome::PreTooConfident => {
                    r.alpha = (r.alpha * cfg.bold_down).max(cfg.alpha_min);
                    r.last = Some(pair);
                }
                Outcome::Success => {
                    results[i] = Some(AttackResult {
                        status: Status::Kept,
                        pair: Some(pair.clone()),
                        last: Some(pair),
                        iters: r.iters,
                        final_alpha: r.alpha,
                        trace: std::mem::take(&mut r.trace),
                    });
                    continue;
                }
            }
            still.push((i, r));
        }
        running = still;
    }
    for (i, r) in running {
        results[i] = Some(AttackResult {
            status: Status::Failed,
            pair: None,
            last: r.last,
            iters: r.iters,
            final_alpha: r.alpha,
            trace: r.trace,
        });
    }
    Ok(results.into_iter().map(|r| r.expect("every example resolved")).collect())
}

/// Attack one image; see [`border_attack_batch`].
pub fn border_attack<R: Rng + ?Sized>(
    teacher: &Model,
    x0: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AttackResult> {
    let mut out = border_attack_batch(teacher, &[(x0, target)], cfg, true, rng)?;
    Ok(out.remove(0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterCounts {
    pub attempted: usize,
    pub skipped: usize,
    pub failed: usize,
    pub kept: usize,
}

/// Keep the pairs that satisfy every boundary criterion, in input order.
/// `None` entries count as skipped; invalid pairs as failed.
pub fn filter_pairs(pairs: &[Option<BoundaryPair>], threshold: f32) -> (Vec<BoundaryPair>, FilterCounts) {
    let mut counts = FilterCounts {
        attempted: pairs.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for p in pairs {
        match p {
            None => counts.skipped += 1,
            Some(p) if p.is_valid(threshold) => {
                counts.kept += 1;
                kept.push(p.clone());
            }
            Some(_) => counts.failed += 1,
        }
    }
    (kept, counts)
}

/// Push each image one step further into the class the teacher already
/// assigns it, inside a ball centred on the image itself.
pub fn deeper_batch(teacher: &Model, images: &[&Tensor], cfg: &DeeperConfig) -> Result<Vec<Tensor>> {
    require_eval(teacher)?;
    if images.is_empty() {
        return Ok(Vec::new());
    }
    let own = probe(teacher, images, &vec![0; images.len()], false)?.preds;
    let mut cur: Vec<Tensor> = images.iter().map(|&x| x.clone()).collect();
    for _ in 0..cfg.iters {
        let refs: Vec<&Tensor> = cur.iter().collect();
        let p = probe(teacher, &refs, &own, true)?;
        cur = cur
            .iter()
            .zip(images)
            .zip(&p.grads)
            .map(|((x, o), g)| project_step(x, g, cfg.alpha, o, cfg.epsilon))
            .collect();
    }
    Ok(cur)
}

pub fn deeper_attack(teacher: &Model, pair: &BoundaryPair, cfg: &DeeperConfig) -> Result<(Tensor, Tensor)> {
    let mut out = deeper_batch(teacher, &[&pair.pre, &pair.post], cfg)?;
    let post = out.pop().expect("two images");
    let pre = out.pop().expect("two images");
    Ok((pre, post))
}

/// Which images an attacked batch contributes to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IncludeFlags {
    pub border: bool,
    pub deeper: bool,
    pub pre_success: bool,
    pub filters: bool,
    /// Also emit the un-attacked inputs and their pre-mixup originals.
    pub normal_and_mixup: bool,
}

impl Default for IncludeFlags {
    fn default() -> Self {
        Self {
            border: true,
            deeper: true,
            pre_success: true,
            filters: true,
            normal_and_mixup: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageKind {
    Input,
    PreMixup,
    Pre,
    Post,
    DeeperPre,
    DeeperPost,
    /// Un-attacked input when the border attack is disabled.
    Passthrough,
    DeeperPassthrough,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttackStats {
    pub counts: FilterCounts,
    pub mean_iters: f64,
    pub mean_final_alpha: f64,
}

impl AttackStats {
    /// Kept pairs over attacked (non-skipped) examples.
    pub fn success_rate(&self) -> f64 {
        let tried = self.counts.attempted - self.counts.skipped;
        if tried == 0 {
            0.0
        } else {
            self.counts.kept as f64 / tried as f64
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttackOutput {
    pub images: Vec<Tensor>,
    pub kinds: Vec<ImageKind>,
    pub pairs: Vec<BoundaryPair>,
    pub stats: AttackStats,
}

/// One attack input: the (possibly mixed) image, its target, and the image
/// before mixing when there was one.
#[derive(Clone, Debug)]
pub struct AttackItem {
    pub image: Tensor,
    pub target: usize,
    pub pre_mixup: Option<Tensor>,
}

/// Border attack, filtering, and deeper attack over a batch, assembled into
/// the images the student trains on.
pub fn attack_batch<R: Rng + ?Sized>(
    teacher: &Model,
    items: &[AttackItem],
    cfg: &AttackConfig,
    deeper: &DeeperConfig,
    flags: IncludeFlags,
    rng: &mut R,
) -> Result<AttackOutput> {
    let mut out = AttackOutput::default();
    if flags.normal_and_mixup {
        for it in items {
            if let Some(p) = &it.pre_mixup {
                out.images.push(p.clone());
                out.kinds.push(ImageKind::PreMixup);
            }
            out.images.push(it.image.clone());
            out.kinds.push(ImageKind::Input);
        }
    }

    if !flags.border {
        out.stats.counts.attempted = items.len();
        let inputs: Vec<&Tensor> = items.iter().map(|it| &it.image).collect();
        if !flags.normal_and_mixup {
            for x in &inputs {
                out.images.push((*x).clone());
                out.kinds.push(ImageKind::Passthrough);
            }
        }
        if flags.deeper {
            for x in deeper_batch(teacher, &inputs, deeper)? {
                out.images.push(x);
                out.kinds.push(ImageKind::DeeperPassthrough);
            }
        }
        return Ok(out);
    }

    let pairs_in: Vec<(&Tensor, usize)> = items.iter().map(|it| (&it.image, it.target)).collect();
    let results = border_attack_batch(teacher, &pairs_in, cfg, false, rng)?;
    let attacked: Vec<&AttackResult> = results.iter().filter(|r| r.status != Status::Skipped).collect();
    if !attacked.is_empty() {
        let n = attacked.len() as f64;
        out.stats.mean_iters = attacked.iter().map(|r| r.iters as f64).sum::<f64>() / n;
        out.stats.mean_final_alpha = attacked.iter().map(|r| r.final_alpha as f64).sum::<f64>() / n;
    }
    let (pairs, counts) = if flags.filters {
        let opts: Vec<Option<BoundaryPair>> = results.iter().map(|r| r.pair.clone()).collect();
        filter_pairs(&opts, cfg.softmax_threshold)
    } else {
        let skipped = results.iter().filter(|r| r.status == Status::Skipped).count();
        let kept: Vec<BoundaryPair> = results.iter().filter_map(|r| r.last.clone()).collect();
        let counts = FilterCounts {
            attempted: results.len(),
            skipped,
            failed: results.len() - skipped - kept.len(),
            kept: kept.len(),
        };
        (kept, counts)
    };
    out.stats.counts = counts;

    let mut deep_in: Vec<&Tensor> = Vec::new();
    for p in &pairs {
        if flags.pre_success {
            out.images.push(p.pre.clone());
            out.kinds.push(ImageKind::Pre);
        }
        out.images.push(p.post.clone());
        out.kinds.push(ImageKind::Post);
        if flags.deeper {
            if flags.pre_success {
                deep_in.push(&p.pre);
            }
            deep_in.push(&p.post);
        }
    }
    if flags.deeper {
        let deep = deeper_batch(teacher, &deep_in, deeper)?;
        let mut it = deep.into_iter();
        for _ in &pairs {
            if flags.pre_success {
                out.images.push(it.next().expect("one per input"));
                out.kinds.push(ImageKind::DeeperPre);
            }
            out.images.push(it.next().expect("one per input"));
            out.kinds.push(ImageKind::DeeperPost);
        }
    }
    out.pairs = pairs;
    Ok(out)
}
