"""Dataset generation, pseudo-labelling, training, evaluation and inference.

Dataset layout::

    <dataset>/dataset.json          summary (sequence ids, weather tags, scene)
    <dataset>/<sequence_id>/        one sequence directory (see ``synth``)

Run layout::

    <run_dir>/config.json           resolved configuration
    <run_dir>/metrics.csv           per-epoch train/val metrics
    <run_dir>/checkpoint/           ADVT tensors + header.json
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as M
from . import regularizers as R
from . import synth
from .config import RunConfig, derive_seed
from .lsags import LsmConfig, build_segments, gsm_shuffle
from .network import (
    AdamState,
    SegNetwork,
    adam_step,
    batch_inputs,
    load_checkpoint,
    network_arrays,
    network_from_checkpoint,
    save_checkpoint,
)
from .sbicac import labels_to_classmap, sbicac_restarts, segments_to_features
from .tensor import Tensor, backward, cross_entropy, mul, softmax, tsum
from .unfolding import ContrastConfig, UnfoldParams, batch_forward_backward, regularizer_grads

log = logging.getLogger(__name__)

DATASET_SUMMARY = "dataset.json"


class NumericError(ArithmeticError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# dataset


def gen_data(cfg: RunConfig, out_dir=None) -> dict:
    """Write ``cfg.dataset.sequences`` sequences plus ``dataset.json``; returns the summary."""
    cfg.validate()
    out = Path(out_dir or cfg.paths.dataset)
    out.mkdir(parents=True, exist_ok=True)
    scene = cfg.scene_config
    n = cfg.dataset.sequences
    tags = synth.dataset_weather(cfg.dataset.weather, n, cfg.data_seed)
    ids = []
    for i in range(n):
        seq_id = f"seq_{i:03d}"
        seq = synth.generate_sequence(synth.with_weather(scene, tags[i]), derive_seed(cfg.data_seed, "data", i), seq_id)
        synth.write_sequence(seq, out / seq_id)
        ids.append(seq_id)
    summary = {
        "sequences": ids,
        "weather": tags,
        "weather_counts": dict(sorted(Counter(tags).items())),
        "seed": cfg.data_seed,
        "scene": json.loads(json.dumps(scene.__dict__)),
    }
    (out / DATASET_SUMMARY).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_dataset(directory) -> list[synth.FrameSequence]:
    d = Path(directory)
    summary = d / DATASET_SUMMARY
    if summary.is_file():
        ids = json.loads(summary.read_text())["sequences"]
    else:
        ids = sorted(p.name for p in d.iterdir() if (p / synth.MANIFEST).is_file()) if d.is_dir() else []
    if not ids:
        raise synth.DatasetError(f"{d}: no sequences found")
    return [synth.read_sequence(d / i) for i in ids]


def split_sequences(seqs, fraction: float, master: int):
    """Seeded split into (train, val); at least one sequence stays in train."""
    n = len(seqs)
    n_val = int(round(fraction * n))
    n_val = min(n_val, n - 1)
    order = np.random.default_rng(derive_seed(master, "split")).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(seqs) if i not in val_idx]
    val = [s for i, s in enumerate(seqs) if i in val_idx]
    return train, val


def instance_masks(seq: synth.FrameSequence, jitter: float) -> np.ndarray:
    return synth.generate_category_agnostic_masks(seq, seed=seq.seed, jitter=jitter)


def pseudo_labels(seqs, cfg: RunConfig, masks: dict | None = None):
    """Cluster segment features of every frame of ``seqs`` jointly.

    Joint clustering keeps cluster ids consistent across frames and sequences.
    Returns ``({sequence_id: T x H x W ids}, ClusterResult)``.
    """
    masks = masks or {}
    feats = []
    shapes = []
    for seq in seqs:
        m = masks.get(seq.sequence_id)
        if m is None:
            m = instance_masks(seq, cfg.sbicac.jitter)
        for t in range(len(seq)):
            feats.append(segments_to_features(seq.frames[t], m[t]))
        shapes.append((seq.sequence_id, len(seq), seq.height, seq.width))
    x = np.concatenate(feats)
    result = sbicac_restarts(x, cfg.n_clusters, cfg.sbicac.restarts, cfg.sbicac.max_iter, derive_seed(cfg.seed, "sbicac"))
    out = {}
    pos = 0
    for seq_id, t_count, h, w in shapes:
        maps = []
        for _ in range(t_count):
            maps.append(labels_to_classmap(result.labels[pos:pos + h * w], h, w))
            pos += h * w
        out[seq_id] = np.stack(maps)
    return out, result


def pseudo_name(t: int) -> str:
    return f"pseudo_{t:04d}.pgm"


def cluster(cfg: RunConfig, dataset_dir=None, require_masks: bool = False) -> dict:
    """Pseudo-label every frame of a dataset and report mapped mIoU against ground truth.

    Instance masks are read from the sequence directories when present,
    otherwise produced by the mask generator and written alongside.
    """
    cfg.validate()
    d = Path(dataset_dir or cfg.paths.dataset)
    seqs = load_dataset(d)
    masks = {}
    for seq in seqs:
        sd = d / seq.sequence_id
        if (sd / synth.mask_name(0)).is_file():
            masks[seq.sequence_id] = synth.read_masks(sd, len(seq))
        elif require_masks:
            raise synth.DatasetError(f"{sd}: missing instance masks")
        else:
            masks[seq.sequence_id] = instance_masks(seq, cfg.sbicac.jitter)
            synth.write_masks(masks[seq.sequence_id], sd)
    labels, result = pseudo_labels(seqs, cfg, masks)
    rows = []
    for seq in seqs:
        pl = labels[seq.sequence_id]
        for t, m in enumerate(pl):
            synth.write_pgm(d / seq.sequence_id / pseudo_name(t), m)
        rows.append(
            {
                "sequence_id": seq.sequence_id,
                "per_class_max": M.mapped_miou(pl, seq.labels, "per-class-max").miou,
                "bijective": M.mapped_miou(pl, seq.labels, "bijective").miou,
            }
        )
    all_pred = np.concatenate([labels[s.sequence_id].reshape(-1) for s in seqs])
    all_gt = np.concatenate([s.labels.reshape(-1) for s in seqs])
    pcm = M.mapped_miou(all_pred, all_gt, "per-class-max")
    bij = M.mapped_miou(all_pred, all_gt, "bijective")
    report = {
        "n_clusters": cfg.n_clusters,
        "iterations": result.iterations,
        "converged": result.converged,
        "per_class_max_miou": pcm.miou,
        "bijective_miou": bij.miou,
        "bijective_mapping": {str(k): v for k, v in bij.mapping.items()},
        "sequences": rows,
    }
    (d / "cluster_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    run_dir: Path
    records: list[dict]
    net: SegNetwork
    unfold: UnfoldParams | None
    val_metrics: dict = field(default_factory=dict)
    alignment: np.ndarray | None = None
    losses: list[float] = field(default_factory=list)  # mean training loss per epoch


def align_clusters(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    """Lookup table cluster id -> class id from the IoU-maximizing one-to-one matching."""
    from scipy.optimize import linear_sum_assignment

    cm = M.confusion_matrix(pred, gt, n_classes, n_classes).counts.astype(np.float64)
    union = cm.sum(axis=1, keepdims=True) + cm.sum(axis=0, keepdims=True) - cm
    iou = np.divide(cm, union, out=np.zeros_like(cm), where=union > 0)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    lut = np.zeros(n_classes, dtype=np.int64)
    lut[cols] = rows
    return lut


def predict(net: SegNetwork, segments, batch_size: int, mode: str) -> np.ndarray:
    preds = []
    for i in range(0, len(segments), batch_size):
        batch = segments[i:i + batch_size]
        logits = net(batch_inputs(batch, mode))
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def _vrs_terms(p: np.ndarray, labels: np.ndarray, cfg: RunConfig, seeds):
    """Mean BD and contrastive values over a batch and their gradient w.r.t. ``p``."""
    n = len(p)
    contrast = _contrast(cfg)
    grad = np.empty_like(p)
    bd_total = con_total = 0.0
    for i in range(n):
        py = R.smooth_onehot(labels[i], p.shape[1])
        g_bd, g_con, _, bd_val, con_val = regularizer_grads(p[i], py, labels[i], contrast, seeds[i])
        grad[i] = (cfg.vrs.alpha * g_bd + cfg.vrs.gamma * g_con) / n
        bd_total += bd_val / n
        con_total += con_val / n
    return bd_total, con_total, grad


def _contrast(cfg: RunConfig) -> ContrastConfig:
    c = cfg.contrast
    return ContrastConfig(c.tau, c.anchors, c.s_pos, c.s_neg)


def _unfold_columns(u: UnfoldParams | None) -> dict:
    if u is None:
        return {}
    out = {}
    for name in ("alpha", "gamma", "eta"):
        for k, v in enumerate(getattr(u, name)):
            out[f"{name}_{k + 1}"] = float(v)
    return out


def train(cfg: RunConfig, seqs=None, run_dir=None, write: bool = True) -> TrainResult:
    """Train per the config; writes config.json, metrics.csv and checkpoint/ when ``write``."""
    cfg.validate()
    run = Path(run_dir or cfg.paths.run_dir)
    if seqs is None:
        seqs = load_dataset(cfg.paths.dataset)
    n_classes = cfg.classes
    for s in seqs:
        if len(s.class_names) != n_classes:
            raise synth.DatasetError(f"{s.sequence_id}: dataset has {len(s.class_names)} classes, config {n_classes}")
        if s.labels.max() >= n_classes:
            raise synth.DatasetError(f"{s.sequence_id}: label id {s.labels.max()} >= {n_classes}")
    train_seqs, val_seqs = split_sequences(seqs, cfg.val_fraction, cfg.seed)

    pseudo = cfg.label_source == "sbicac"
    train_labels = {}
    if pseudo:
        if cfg.n_clusters != n_classes:
            raise synth.ConfigError("training on pseudo-labels needs sbicac.n_clusters equal to the class count")
        train_labels, _ = pseudo_labels(train_seqs, cfg)

    lsm = LsmConfig(depth=cfg.lsm.depth, fusion=cfg.lsm.fusion)
    train_segments = []
    for s in train_seqs:
        train_segments += build_segments(s, lsm, train_labels.get(s.sequence_id))
    val_segments = []
    for s in val_seqs:
        val_segments += build_segments(s, lsm)

    net = SegNetwork(mode=cfg.lsm.fusion, classes=n_classes, channels=tuple(cfg.network.channels),
                     seed=derive_seed(cfg.seed, "init"))
    unfold = UnfoldParams.init(cfg.unfold.K, cfg.unfold.alpha0, cfg.unfold.gamma0, cfg.unfold.eta0) if cfg.mode == "URs" else None
    o = cfg.optim
    unfold_names = ("unfold.alpha", "unfold.gamma", "unfold.eta")
    state = AdamState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay,
                      no_decay=frozenset(unfold_names))
    contrast = _contrast(cfg)
    gsm_base = derive_seed(cfg.seed, "gsm")
    records = []
    losses = []
    val_summary: dict = {}
    lut = None

    for epoch in range(1, cfg.epochs + 1):
        batches = gsm_shuffle(train_segments, gsm_base + epoch, cfg.batch_size, enabled=cfg.gsm)
        train_cm = M.ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
        loss_sum = 0.0
        for bi, batch in enumerate(batches):
            labels = np.stack([s.labels for s in batch])
            net.zero_grad()
            logits = net(batch_inputs(batch, cfg.lsm.fusion))
            seeds = [derive_seed(cfg.seed, "contrast", epoch, bi, i) for i in range(len(batch))]
            if cfg.mode == "CE":
                loss_t = cross_entropy(logits, labels)
                loss = loss_t.item()
                backward(loss_t)
            elif cfg.mode == "VRs":
                ce = cross_entropy(logits, labels)
                p = softmax(logits)
                bd_val, con_val, g = _vrs_terms(p.data, labels, cfg, seeds)
                loss = ce.item() + cfg.vrs.alpha * bd_val + cfg.vrs.gamma * con_val
                backward(ce + tsum(mul(p, Tensor(g))))
            else:
                p = softmax(logits)
                loss, dx0, ug, _ = batch_forward_backward(p.data, labels, unfold, seeds, contrast)
                backward(tsum(mul(p, Tensor(dx0))))
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            loss_sum += loss * len(batch)
            params = {k: t.data for k, t in net.params.items()}
            grads = {k: t.grad for k, t in net.params.items() if t.grad is not None}
            if unfold is not None and unfold.K:
                params.update(dict(zip(unfold_names, (unfold.alpha, unfold.gamma, unfold.eta))))
                grads.update(dict(zip(unfold_names, (ug.alpha, ug.gamma, ug.eta))))
            adam_step(params, grads, state)
            if unfold is not None:
                unfold.project()
            train_cm = train_cm + M.confusion_matrix(logits.data.argmax(axis=1), labels, n_classes)

        losses.append(loss_sum / len(train_segments))
        extra = _unfold_columns(unfold)
        tm = M.seg_metrics(train_cm).summary()
        records.append(M.summary_record(epoch, "train", tm, extra))
        if val_segments:
            pred = predict(net, val_segments, cfg.batch_size, cfg.lsm.fusion)
            gt = np.stack([s.labels for s in val_segments])
            if pseudo:
                lut = align_clusters(pred, gt, n_classes)
                pred = lut[pred]
            val_summary = M.seg_metrics(M.confusion_matrix(pred, gt, n_classes)).summary()
            records.append(M.summary_record(epoch, "val", val_summary, extra))
        log.info("epoch %d loss %.4f train mIoU %.2f val mIoU %.2f", epoch, losses[-1],
                 tm["mIoU"], val_summary.get("mIoU", float("nan")))

    result = TrainResult(run, records, net, unfold, val_summary, lut, losses)
    if write:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(cfg.dumps())
        M.write_metrics_csv(records, run / "metrics.csv")
        save_run_checkpoint(run / "checkpoint", cfg, net, unfold, cfg.epochs, lut)
    return result


def save_run_checkpoint(directory, cfg: RunConfig, net: SegNetwork, unfold, epoch: int, lut=None) -> None:
    arrays = network_arrays(net)
    if unfold is not None:
        arrays.update(unfold.arrays())
    header = {
        "mode": cfg.mode,
        "fusion": cfg.lsm.fusion,
        "depth": cfg.lsm.depth,
        "network": net.spec(),
        "seed": cfg.seed,
        "epoch": epoch,
        "label_source": cfg.label_source,
        "classes": cfg.classes,
    }
    if lut is not None:
        header["cluster_to_class"] = [int(v) for v in lut]
    save_checkpoint(directory, arrays, header)


def load_run_checkpoint(directory):
    try:
        arrays, header = load_checkpoint(directory)
        net = network_from_checkpoint(arrays, header)
        unfold = UnfoldParams.from_arrays(arrays) if "unfold.alpha" in arrays else None
        for key in ("fusion", "depth", "classes", "epoch"):
            header[key]
    except (KeyError, ValueError) as e:
        raise synth.DatasetError(f"{directory}: unusable checkpoint ({e})") from None
    return net, unfold, header


# ---------------------------------------------------------------------------
# evaluation / inference


def _checkpoint_dir(cfg: RunConfig) -> Path:
    return Path(cfg.paths.checkpoint or Path(cfg.paths.run_dir) / "checkpoint")


def _predict_sequence(net, header, seq, batch_size):
    segs = build_segments(seq, LsmConfig(depth=header["depth"], fusion=header["fusion"]))
    return predict(net, segs, batch_size, header["fusion"])


def evaluate(cfg: RunConfig, checkpoint=None, dataset_dir=None, out_path=None, per_frame_path=None) -> list[dict]:
    """Per-sequence and aggregate metrics rows (split = sequence id or ``all``).

    Checkpoints trained on pseudo-labels predict cluster ids; those are aligned
    to classes by the bijective matching over all evaluated pixels.
    """
    ckpt = Path(checkpoint or _checkpoint_dir(cfg))
    net, _, header = load_run_checkpoint(ckpt)
    seqs = load_dataset(dataset_dir or cfg.paths.dataset)
    n_classes = int(header["classes"])
    for s in seqs:
        if len(s.class_names) != n_classes or s.labels.max() >= n_classes:
            raise synth.DatasetError(f"{s.sequence_id}: class count does not match checkpoint ({n_classes})")
    preds = {s.sequence_id: _predict_sequence(net, header, s, cfg.batch_size) for s in seqs}
    if header.get("label_source") == "sbicac":
        lut = align_clusters(np.concatenate([p.reshape(-1) for p in preds.values()]),
                             np.concatenate([s.labels.reshape(-1) for s in seqs]), n_classes)
        preds = {k: lut[v] for k, v in preds.items()}
    return _metric_rows(seqs, preds, n_classes, int(header["epoch"]), out_path, per_frame_path)


def _metric_rows(seqs, preds, n_classes, epoch, out_path=None, per_frame_path=None) -> list[dict]:
    rows, frame_rows = [], []
    total = M.ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    for s in seqs:
        p = preds[s.sequence_id]
        cm = M.confusion_matrix(p, s.labels, n_classes)
        total = total + cm
        rows.append(M.summary_record(epoch, s.sequence_id, M.seg_metrics(cm).summary()))
        for t in range(len(s)):
            fm = M.seg_metrics(M.confusion_matrix(p[t], s.labels[t], n_classes)).summary()
            frame_rows.append(M.summary_record(epoch, f"{s.sequence_id}/{t:04d}", fm))
    rows.append(M.summary_record(epoch, "all", M.seg_metrics(total).summary()))
    if out_path:
        M.write_metrics_csv(rows, M.ensure_parent(out_path))
    if per_frame_path:
        M.write_metrics_csv(frame_rows, M.ensure_parent(per_frame_path))
    return rows


def evaluate_labels(seqs, preds: dict, n_classes: int, epoch: int = 0, out_path=None, per_frame_path=None):
    """Metric rows for externally supplied prediction maps (e.g. ground truth itself)."""
    return _metric_rows(seqs, preds, n_classes, epoch, out_path, per_frame_path)


def infer(cfg: RunConfig, checkpoint=None, dataset_dir=None, out_dir=None) -> Path:
    """Write one predicted label PGM per frame: ``<out>/<sequence_id>/pred_XXXX.pgm``."""
    ckpt = Path(checkpoint or _checkpoint_dir(cfg))
    net, _, header = load_run_checkpoint(ckpt)
    lut = np.array(header["cluster_to_class"]) if "cluster_to_class" in header else None
    out = Path(out_dir or cfg.paths.output or Path(cfg.paths.run_dir) / "predictions")
    for seq in load_dataset(dataset_dir or cfg.paths.dataset):
        pred = _predict_sequence(net, header, seq, cfg.batch_size)
        if lut is not None:
            pred = lut[pred]
        sd = out / seq.sequence_id
        sd.mkdir(parents=True, exist_ok=True)
        for t, m in enumerate(pred):
            synth.write_pgm(sd / f"pred_{t:04d}.pgm", m)
    return out
