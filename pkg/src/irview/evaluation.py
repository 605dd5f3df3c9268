"""Evaluation suite: error reports, low-shot classification, cluster analysis.

Three independent checks of a trained predictor: average test-set errors,
classification accuracy when one class's real training images are swapped
for generated ones, and cluster structure of the latents before and after
pose fusion (silhouette score plus a 2D t-SNE projection).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data import SampleKey, ViewPair, ViewSample, encode_pose
from .model import ViewPredictor, images_to_tensor, poses_to_tensor
from .tsne import tsne

STAGES = ("pre_fusion", "post_fusion")


# ---------------------------------------------------------------------------
# average test error


@dataclass
class PairError:
    input_key: SampleKey
    target_key: SampleKey
    embedding: float
    output: float
    total: float


@dataclass
class EvalReport:
    """Average test errors plus the per-pair and per-class breakdowns."""

    n_pairs: int
    mean_embedding: float
    mean_output: float
    mean_total: float
    per_class: dict[int, dict[str, float]]
    pair_errors: list[PairError]
    metadata: dict[str, str] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            "average test error",
            f"pairs: {self.n_pairs}",
            f"mean_embedding_mse: {self.mean_embedding:.10e}",
            f"mean_output_mse:    {self.mean_output:.10e}",
            f"mean_total_mse:     {self.mean_total:.10e}",
            "",
            "class  n_pairs  mean_output_mse",
        ]
        for class_id in sorted(self.per_class):
            row = self.per_class[class_id]
            lines.append(f"{class_id:<6d} {int(row['n']):<8d} {row['mean_output']:.10e}")
        for key in sorted(self.metadata):
            lines.append(f"# {key}={self.metadata[key]}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path, stem: str = "eval_report") -> tuple[Path, Path]:
        """Human-readable table plus machine-readable per-pair records."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        text_path = out_dir / f"{stem}.txt"
        text_path.write_text(self.to_text(), encoding="utf-8")
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["class_id", "input_azimuth", "target_azimuth", "input_dn", "target_dn",
                 "embedding_mse", "output_mse", "total_mse"]
            )
            for p in self.pair_errors:
                writer.writerow(
                    [p.input_key[0], f"{p.input_key[1]:g}", f"{p.target_key[1]:g}",
                     p.input_key[2], p.target_key[2],
                     f"{p.embedding:.10e}", f"{p.output:.10e}", f"{p.total:.10e}"]
                )
        return text_path, csv_path


def average_test_error(
    model: ViewPredictor,
    test_pairs: Sequence[ViewPair],
    target_embeddings: Mapping[SampleKey, np.ndarray],
    metadata: dict[str, str] | None = None,
    batch_size: int = 128,
) -> EvalReport:
    """Mean embedding/output/total MSE over the test pairs, deterministic."""
    if not test_pairs:
        raise ValueError("cannot evaluate on an empty test set")
    model.eval()
    errors: list[PairError] = []
    with torch.no_grad():
        for start in range(0, len(test_pairs), batch_size):
            chunk = test_pairs[start : start + batch_size]
            x = images_to_tensor([p.input.image for p in chunk])
            pose = poses_to_tensor([p.pose for p in chunk])
            y = images_to_tensor([p.target.image for p in chunk])
            e_ref = torch.from_numpy(
                np.stack(
                    [np.asarray(target_embeddings[p.target.key()], dtype=np.float32) for p in chunk]
                )
            )
            _, post, pred = model(x, pose)
            e_pp = torch.mean((post - e_ref) ** 2, dim=1).cpu().numpy()
            o_pp = torch.mean((pred - y) ** 2, dim=(1, 2, 3)).cpu().numpy()
            for pair, e_val, o_val in zip(chunk, e_pp, o_pp):
                errors.append(
                    PairError(
                        input_key=pair.input.key(),
                        target_key=pair.target.key(),
                        embedding=float(e_val),
                        output=float(o_val),
                        total=float(e_val) + float(o_val),
                    )
                )
    per_class: dict[int, dict[str, float]] = {}
    for class_id in sorted({p.input_key[0] for p in errors}):
        rows = [p for p in errors if p.input_key[0] == class_id]
        per_class[class_id] = {
            "n": float(len(rows)),
            "mean_output": float(np.mean([p.output for p in rows])),
            "mean_embedding": float(np.mean([p.embedding for p in rows])),
            "mean_total": float(np.mean([p.total for p in rows])),
        }
    return EvalReport(
        n_pairs=len(errors),
        mean_embedding=float(np.mean([p.embedding for p in errors])),
        mean_output=float(np.mean([p.output for p in errors])),
        mean_total=float(np.mean([p.total for p in errors])),
        per_class=per_class,
        pair_errors=errors,
        metadata=metadata or {},
    )


# ---------------------------------------------------------------------------
# novel-view corpus generation


def generate_class_corpus(
    model: ViewPredictor,
    seed_images: Sequence[ViewSample],
    target_poses: Sequence[tuple[float, int]],
    min_output_variance: float = 1e-6,
) -> list[ViewSample]:
    """Predict one view per (seed image, target pose) combination.

    ``target_poses`` are (azimuth_deg, day_night) requests. Outputs carry the
    seed's class id and the requested pose. Refuses to emit the corpus when
    the predictions are essentially constant, which is the signature of
    untrained or zeroed weights.
    """
    if not seed_images:
        raise ValueError("need at least one seed image")
    class_ids = {s.class_id for s in seed_images}
    if len(class_ids) != 1:
        raise ValueError(f"seed images span multiple classes: {sorted(class_ids)}")
    model.eval()
    generated: list[ViewSample] = []
    rasters = []
    with torch.no_grad():
        for seed in seed_images:
            poses = poses_to_tensor(
                [encode_pose(seed.azimuth_deg, az, dn) for az, dn in target_poses]
            )
            x = images_to_tensor([seed.image]).repeat(len(target_poses), 1, 1, 1)
            _, _, pred = model(x, poses)
            arr = pred.squeeze(1).cpu().numpy()
            for (az, dn), raster in zip(target_poses, arr):
                raster = np.clip(raster.astype(np.float32), -1.0, 1.0)
                rasters.append(raster)
                generated.append(
                    ViewSample(
                        image=raster,
                        class_id=seed.class_id,
                        azimuth_deg=az,
                        day_night=dn,
                        range_m=seed.range_m,
                    )
                )
    variance = float(np.var(np.stack(rasters)))
    if variance < min_output_variance:
        raise ValueError(
            f"predictor output variance {variance:.3e} below {min_output_variance:.1e}; "
            "refusing to build a corpus from an untrained model"
        )
    return generated


# ---------------------------------------------------------------------------
# low-shot classification


@dataclass
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    class_ids: list[int]
    counts: np.ndarray  # (C, C) int64

    def accuracy(self) -> float:
        total = int(self.counts.sum())
        if total == 0:
            raise ValueError("empty confusion matrix")
        return float(np.trace(self.counts)) / total

    def recall(self, class_id: int) -> float:
        i = self.class_ids.index(class_id)
        row = self.counts[i].sum()
        return float(self.counts[i, i]) / row if row else 0.0

    def to_text(self) -> str:
        header = "true\\pred " + " ".join(f"{c:>6d}" for c in self.class_ids)
        lines = [header]
        for i, c in enumerate(self.class_ids):
            lines.append(f"{c:>9d} " + " ".join(f"{v:>6d}" for v in self.counts[i]))
        lines.append(f"accuracy {self.accuracy():.4f}")
        return "\n".join(lines) + "\n"


@dataclass
class ClassifierConfig:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3


class SmallClassifier(nn.Module):
    """Four stride-2 conv blocks and a linear softmax head, trained from scratch."""

    def __init__(self, n_classes: int, config: ClassifierConfig):
        super().__init__()
        layers = []
        in_ch = 1
        for ch in config.channels:
            layers.append(nn.Conv2d(in_ch, ch, 3, stride=2, padding=1))
            layers.append(nn.ReLU())
            in_ch = ch
        self.features = nn.Sequential(*layers)
        side = 64 // (2 ** len(config.channels))
        self.head = nn.Linear(in_ch * side * side, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        return self.head(f.reshape(x.shape[0], -1))


def _train_classifier(
    samples: Sequence[ViewSample],
    class_ids: list[int],
    config: ClassifierConfig,
    seed: int,
) -> SmallClassifier:
    index = {c: i for i, c in enumerate(class_ids)}
    torch.manual_seed(seed)
    clf = SmallClassifier(len(class_ids), config)
    x = images_to_tensor([s.image for s in samples])
    labels = torch.tensor([index[s.class_id] for s in samples], dtype=torch.long)
    optimizer = torch.optim.Adam(clf.parameters(), lr=config.lr)
    loss_fn = nn.CrossEntropyLoss()
    rng = np.random.default_rng(seed)
    for _ in range(config.epochs):
        order = rng.permutation(len(samples))
        for start in range(0, len(samples), config.batch_size):
            idx = order[start : start + config.batch_size]
            logits = clf(x[idx])
            loss = loss_fn(logits, labels[idx])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    clf.eval()
    return clf


def _confusion(
    clf: SmallClassifier, samples: Sequence[ViewSample], class_ids: list[int]
) -> ConfusionMatrix:
    index = {c: i for i, c in enumerate(class_ids)}
    counts = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    with torch.no_grad():
        x = images_to_tensor([s.image for s in samples])
        pred = clf(x).argmax(dim=1).cpu().numpy()
    for s, p in zip(samples, pred):
        counts[index[s.class_id], p] += 1
    return ConfusionMatrix(class_ids=class_ids, counts=counts)


@dataclass
class LowShotResult:
    accuracy_substituted: float
    accuracy_all_real: float
    confusion_substituted: ConfusionMatrix
    confusion_all_real: ConfusionMatrix
    substituted_class: int


def _stratified_split(
    samples: Sequence[ViewSample], test_fraction: float, seed: int
) -> tuple[list[ViewSample], list[ViewSample]]:
    rng = np.random.default_rng(seed)
    train: list[ViewSample] = []
    test: list[ViewSample] = []
    by_class: dict[int, list[ViewSample]] = {}
    for s in samples:
        by_class.setdefault(s.class_id, []).append(s)
    for class_id in sorted(by_class):
        group = sorted(by_class[class_id], key=lambda s: s.key())
        order = rng.permutation(len(group))
        n_test = int(round(test_fraction * len(group)))
        test_idx = set(order[:n_test].tolist())
        for i, s in enumerate(group):
            (test if i in test_idx else train).append(s)
    return train, test


def low_shot_eval(
    real_corpus: Sequence[ViewSample],
    substituted_class: int,
    generated_corpus: Sequence[ViewSample],
    classifier_config: ClassifierConfig,
    seed: int,
    test_fraction: float = 0.25,
) -> LowShotResult:
    """Train twin classifiers on all-real vs substituted corpora.

    The substituted run drops every real training image of one class and
    uses the generated corpus in its place; both runs share the seed and are
    tested on the same held-out real images only.
    """
    class_ids = sorted({s.class_id for s in real_corpus})
    if substituted_class not in class_ids:
        raise ValueError(f"class {substituted_class} not present in the real corpus")
    gen_classes = {s.class_id for s in generated_corpus}
    if gen_classes != {substituted_class}:
        raise ValueError(
            f"generated corpus must cover exactly class {substituted_class}, got {sorted(gen_classes)}"
        )
    train_real, test_real = _stratified_split(real_corpus, test_fraction, seed)

    corpus_all_real = sorted(train_real, key=lambda s: s.key())
    corpus_substituted = sorted(
        [s for s in train_real if s.class_id != substituted_class] + list(generated_corpus),
        key=lambda s: s.key(),
    )

    clf_real = _train_classifier(corpus_all_real, class_ids, classifier_config, seed)
    clf_sub = _train_classifier(corpus_substituted, class_ids, classifier_config, seed)
    cm_real = _confusion(clf_real, test_real, class_ids)
    cm_sub = _confusion(clf_sub, test_real, class_ids)
    return LowShotResult(
        accuracy_substituted=cm_sub.accuracy(),
        accuracy_all_real=cm_real.accuracy(),
        confusion_substituted=cm_sub,
        confusion_all_real=cm_real,
        substituted_class=substituted_class,
    )


# ---------------------------------------------------------------------------
# embedding export and cluster metrics


@dataclass(eq=False)
class EmbeddingRecord:
    vector: np.ndarray  # (1024,)
    class_id: int
    day_night: int
    stage: str  # "pre_fusion" or "post_fusion"


def export_embeddings(
    model: ViewPredictor,
    samples: Sequence[ViewSample],
    pose_offsets_deg: Sequence[float] = (0.0,),
    batch_size: int = 256,
) -> list[EmbeddingRecord]:
    """Encoder latents before fusion and fused latents after pose injection.

    Per sample: one pre-fusion record, plus one post-fusion record per pose
    offset (the conditioning asks for the sample's own azimuth shifted by the
    offset, in the sample's own regime).
    """
    model.eval()
    records: list[EmbeddingRecord] = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = images_to_tensor([s.image for s in chunk])
            pre = model.encoder(x)
            for s, vec in zip(chunk, pre.cpu().numpy()):
                records.append(
                    EmbeddingRecord(
                        vector=vec.astype(np.float32),
                        class_id=s.class_id,
                        day_night=s.day_night,
                        stage="pre_fusion",
                    )
                )
            for offset in pose_offsets_deg:
                poses = poses_to_tensor(
                    [
                        encode_pose(s.azimuth_deg, (s.azimuth_deg + offset) % 360.0, s.day_night)
                        for s in chunk
                    ]
                )
                post = model.fusion(pre, model.pose_branch(poses))
                for s, vec in zip(chunk, post.cpu().numpy()):
                    records.append(
                        EmbeddingRecord(
                            vector=vec.astype(np.float32),
                            class_id=s.class_id,
                            day_night=s.day_night,
                            stage="post_fusion",
                        )
                    )
    return records


def write_embeddings_csv(records: Sequence[EmbeddingRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(records[0].vector) if records else 1024
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class_id", "day_night", "stage"] + [f"v{i}" for i in range(dim)])
        for r in records:
            writer.writerow(
                [r.class_id, r.day_night, r.stage] + [f"{v:.8e}" for v in r.vector]
            )
    return path


def read_embeddings_csv(path: str | Path) -> list[EmbeddingRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        dim = len(header) - 3
        for row in reader:
            records.append(
                EmbeddingRecord(
                    vector=np.array([float(v) for v in row[3 : 3 + dim]], dtype=np.float32),
                    class_id=int(row[0]),
                    day_night=int(row[1]),
                    stage=row[2],
                )
            )
    return records


def silhouette_score(x: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    For each point, cohesion a is the mean distance to its own cluster
    (excluding itself) and separation b is the smallest mean distance to any
    other cluster; the score is the mean of (b - a) / max(a, b).
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2 or len(labels) != x.shape[0]:
        raise ValueError("need one label per data row")
    unique = np.unique(labels)
    if len(unique) < 2:
        raise ValueError("silhouette needs at least 2 distinct labels")
    counts = {lab: int(np.sum(labels == lab)) for lab in unique}
    if min(counts.values()) < 2:
        raise ValueError("silhouette needs at least 2 points per label")
    d2 = np.sum(x * x, axis=1)[:, None] + np.sum(x * x, axis=1)[None, :] - 2.0 * (x @ x.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    np.fill_diagonal(dist, 0.0)
    if dist.max() == 0.0:
        raise ValueError("all points identical; silhouette undefined")
    n = x.shape[0]
    a = np.zeros(n)
    b = np.full(n, np.inf)
    for lab in unique:
        mask = labels == lab
        sums = dist[:, mask].sum(axis=1)
        a[mask] = sums[mask] / (counts[lab] - 1)
        b[~mask] = np.minimum(b[~mask], sums[~mask] / counts[lab])
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(s))


def _record_labels(records: Sequence[EmbeddingRecord], label_key: str) -> np.ndarray:
    if label_key == "class_id":
        return np.array([r.class_id for r in records])
    if label_key == "class_day_night":
        return np.array([f"{r.class_id}|{r.day_night}" for r in records])
    raise ValueError(f"unknown label_key {label_key!r}")


def silhouette(records: Sequence[EmbeddingRecord], label_key: str = "class_id") -> float:
    """Silhouette of embedding records under class or class-and-regime labels."""
    x = np.stack([r.vector for r in records])
    return silhouette_score(x, _record_labels(records, label_key))


def tsne_project(
    records: Sequence[EmbeddingRecord],
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
) -> np.ndarray:
    """2D projection of embedding records; one point per record, in order."""
    x = np.stack([r.vector for r in records])
    return tsne(x, perplexity=perplexity, n_iter=iterations, seed=seed).points


def render_projection(
    points: np.ndarray,
    labels: Sequence,
    out_path: str | Path,
    day_night: Sequence[int] | None = None,
    title: str | None = None,
) -> Path:
    """Scatter plot colored by label, marker by day/night, plus a sidecar
    ``.legend.txt`` listing the legend entries one per line."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    points = np.asarray(points, dtype=np.float64).reshape(-1, 2) if len(points) else np.zeros((0, 2))
    labels = list(labels)
    if len(labels) != len(points):
        raise ValueError("points and labels must have the same length")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)

    fig, ax = plt.subplots(figsize=(6, 6))
    cmap = plt.get_cmap("tab10")
    unique = sorted(set(labels), key=str)
    legend_entries = []
    for i, lab in enumerate(unique):
        idx = [j for j, l in enumerate(labels) if l == lab]
        color = cmap(i % 10)
        if day_night is not None:
            for dn, marker in ((0, "o"), (1, "^")):
                sub = [j for j in idx if day_night[j] == dn]
                if sub:
                    ax.scatter(points[sub, 0], points[sub, 1], s=12, marker=marker,
                               color=color, label=f"{lab} ({'night' if dn else 'day'})")
        else:
            ax.scatter(points[idx, 0], points[idx, 1], s=12, color=color, label=str(lab))
        legend_entries.append(str(lab))
    if unique:
        ax.legend(loc="best", fontsize=7)
    if title:
        ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)

    legend_path = out_path.with_suffix(out_path.suffix + ".legend.txt")
    legend_path.write_text("\n".join(legend_entries) + ("\n" if legend_entries else ""), encoding="utf-8")
    return out_path
