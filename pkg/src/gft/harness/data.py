"""Dataset plumbing: the XYZL cloud file format, CSV manifests, synthetic
shape generators, and few-shot task sampling.

XYZL v1 is a plain-text format: line 1 is ``XYZL 1 <N> <has_labels>``,
then N lines of ``x y z`` or ``x y z label``. Labels are per-point part
ids; object-level class labels live in the manifest, not the file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..pointops import PointCloud


class CloudFormatError(ValueError):
    """Raised for malformed XYZL files or manifests."""


def save_cloud(path, cloud: PointCloud) -> None:
    has_labels = cloud.point_labels is not None
    lines = [f"XYZL 1 {cloud.num_points} {int(has_labels)}"]
    for i, (x, y, z) in enumerate(cloud.points):
        row = f"{x:.8f} {y:.8f} {z:.8f}"
        if has_labels:
            row += f" {int(cloud.point_labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_cloud(path) -> PointCloud:
    text = Path(path).read_text().splitlines()
    if not text:
        raise CloudFormatError(f"{path}: empty file")
    header = text[0].split()
    if len(header) != 4 or header[0] != "XYZL":
        raise CloudFormatError(f"{path}: bad header {text[0]!r}")
    if header[1] != "1":
        raise CloudFormatError(f"{path}: unsupported version {header[1]}")
    try:
        n = int(header[2])
        has_labels = int(header[3])
    except ValueError as exc:
        raise CloudFormatError(f"{path}: bad header counts: {exc}") from None
    if has_labels not in (0, 1):
        raise CloudFormatError(f"{path}: has_labels must be 0 or 1")
    body = [ln for ln in text[1:] if ln.strip()]
    if len(body) != n:
        raise CloudFormatError(f"{path}: header says {n} points, file has {len(body)}")
    want = 4 if has_labels else 3
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.intp) if has_labels else None
    for i, ln in enumerate(body):
        parts = ln.split()
        if len(parts) != want:
            raise CloudFormatError(
                f"{path}: line {i + 2}: expected {want} fields, got {len(parts)}")
        try:
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            if has_labels:
                labels[i] = int(parts[3])
        except ValueError as exc:
            raise CloudFormatError(f"{path}: line {i + 2}: {exc}") from None
    return PointCloud(pts, point_labels=labels)


@dataclass
class ManifestEntry:
    path: str
    label: int | None
    split: str  # "train" or "test"


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)
    task: str = "classification"

    def split(self, which: str) -> list:
        return [e for e in self.entries if e.split == which]

    @property
    def num_classes(self) -> int:
        labels = sorted({e.label for e in self.entries if e.label is not None})
        if not labels:
            return 0
        if labels != list(range(len(labels))):
            raise CloudFormatError(f"labels not dense in [0, C): {labels}")
        return len(labels)

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root / entry.path

    def load(self, entry: ManifestEntry) -> PointCloud:
        cloud = load_cloud(self.resolve(entry))
        if entry.label is not None:
            cloud.object_label = entry.label
        return cloud


def save_manifest(manifest: DatasetManifest, path=None) -> Path:
    path = Path(path) if path else manifest.root / "manifest.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if manifest.task == "classification":
            writer.writerow(["path", "label", "split"])
            for e in manifest.entries:
                writer.writerow([e.path, e.label, e.split])
        else:
            writer.writerow(["path", "split"])
            for e in manifest.entries:
                writer.writerow([e.path, e.split])
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CloudFormatError(f"{path}: empty manifest")
    header = rows[0]
    if header == ["path", "label", "split"]:
        task = "classification"
    elif header == ["path", "split"]:
        task = "segmentation"
    else:
        raise CloudFormatError(f"{path}: unrecognized manifest header {header}")
    m = DatasetManifest(root=path.parent, task=task)
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise CloudFormatError(f"{path}: row {i}: wrong column count")
        if task == "classification":
            m.entries.append(ManifestEntry(row[0], int(row[1]), row[2]))
        else:
            m.entries.append(ManifestEntry(row[0], None, row[1]))
    for e in m.entries:
        if e.split not in ("train", "test"):
            raise CloudFormatError(f"{path}: bad split {e.split!r}")
        if not m.resolve(e).exists():
            raise CloudFormatError(f"{path}: missing file {e.path}")
    return m


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

CLASSIFICATION4_NAMES = ("sphere", "box", "cone", "torus")
PARTS3_NAMES = ("side", "top", "bottom")


def _unit_sphere(rng, n):
    # antithetic direction pairs keep the centroid at the origin before
    # noise, so the radius bound below survives noising
    half = (n + 1) // 2
    u = rng.normal(size=(half, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return np.vstack([u, -u])[:n]


def _unit_box(rng, n):
    # uniform over the surface of [-1, 1]^3
    face = rng.integers(0, 6, n)
    uv = rng.uniform(-1.0, 1.0, (n, 2))
    pts = np.empty((n, 3))
    axis = face % 3
    sign = np.where(face < 3, 1.0, -1.0)
    for i in range(n):
        others = [j for j in range(3) if j != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _unit_cone(rng, n):
    # apex at z=1, unit base disk at z=0; split lateral/base by area
    p_lateral = np.sqrt(2.0) / (1.0 + np.sqrt(2.0))
    on_side = rng.uniform(size=n) < p_lateral
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.empty((n, 3))
    z = 1.0 - np.sqrt(rng.uniform(size=n))        # density grows toward the base
    r_base = np.sqrt(rng.uniform(size=n))
    for i in range(n):
        if on_side[i]:
            r = 1.0 - z[i]
            pts[i] = [r * np.cos(theta[i]), r * np.sin(theta[i]), z[i]]
        else:
            pts[i] = [r_base[i] * np.cos(theta[i]), r_base[i] * np.sin(theta[i]), 0.0]
    return pts


def _unit_torus(rng, n, tube=0.375):
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    phi = rng.uniform(0.0, 2.0 * np.pi, n)
    ring = 1.0 + tube * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta), tube * np.sin(phi)], axis=1)


def _unit_cylinder_parts(rng, n):
    """Cylinder r=1, z in [-1,1]; labels 0=side, 1=top cap, 2=bottom cap.
    Cap point counts are fixed fractions of n so every instance contains
    all three parts by construction."""
    n_top = max(1, n // 6)
    n_bot = max(1, n // 6)
    n_side = n - n_top - n_bot
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.intp)
    z = rng.uniform(-1.0, 1.0, n_side)
    pts[:n_side] = np.stack([np.cos(theta[:n_side]), np.sin(theta[:n_side]), z], axis=1)
    labels[:n_side] = 0
    for start, count, zval, lab in ((n_side, n_top, 1.0, 1), (n_side + n_top, n_bot, -1.0, 2)):
        r = np.sqrt(rng.uniform(size=count))
        th = theta[start:start + count]
        pts[start:start + count] = np.stack([r * np.cos(th), r * np.sin(th),
                                             np.full(count, zval)], axis=1)
        labels[start:start + count] = lab
    return pts, labels


def _random_rotation(rng, mode: str = "z"):
    """Random rotation matrix. Mode "z" spins about the gravity axis only,
    matching upright scan data; "so3" is uniform over all orientations."""
    if mode == "z":
        a = rng.uniform(0.0, 2.0 * np.pi)
        c, s = np.cos(a), np.sin(a)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    if mode != "so3":
        raise ValueError(f"unknown rotation mode {mode!r}")
    # QR of a Gaussian matrix, sign-fixed: uniform over rotations
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _clipped_noise(rng, n, sigma, max_norm_sigmas=1.5):
    """Gaussian offsets with the vector norm clipped at max_norm_sigmas
    standard deviations. The clip keeps every noisy sphere point within
    radius*(1+4*sigma) of the cloud centroid: |p - c| <= (1+1.5s) + 1.5s."""
    v = rng.normal(0.0, sigma, (n, 3))
    if sigma > 0:
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        cap = max_norm_sigmas * sigma
        factor = np.minimum(1.0, cap / np.maximum(norms, 1e-300))
        v *= factor
    return v


def make_instance(kind: str, class_id: int, n_points: int, noise_sigma: float,
                  rng: np.random.Generator, rotation: str = "z") -> PointCloud:
    """One synthetic cloud: unit shape, random rotation, random scale in
    [0.7, 1.3], clipped Gaussian noise proportional to scale."""
    labels = None
    if kind == "classification4":
        maker = (_unit_sphere, _unit_box, _unit_cone, _unit_torus)[class_id]
        pts = maker(rng, n_points)
    elif kind == "parts3":
        pts, labels = _unit_cylinder_parts(rng, n_points)
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    scale = rng.uniform(0.7, 1.3)
    pts = (pts @ _random_rotation(rng, rotation).T) * scale
    pts = pts + _clipped_noise(rng, n_points, noise_sigma) * scale
    return PointCloud(pts, point_labels=labels)


def synth_dataset(kind: str, out_dir, n_train: int, n_test: int, n_points: int = 256,
                  noise_sigma: float = 0.02, seed: int = 0,
                  rotation: str = "z") -> DatasetManifest:
    """Write a fully seeded synthetic dataset and its manifest.

    classification4 cycles instances through the 4 shape classes so both
    splits are class-balanced; parts3 is single-category per-point data.
    Instances default to gravity-aligned ("z") orientation; pass
    rotation="so3" for arbitrary orientations.
    """
    if n_points < 64:
        raise ValueError("n_points must be >= 64")
    if kind not in ("classification4", "parts3"):
        raise ValueError(f"unknown synthetic kind {kind!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    task = "classification" if kind == "classification4" else "segmentation"
    manifest = DatasetManifest(root=out_dir, task=task)
    num_classes = 4 if kind == "classification4" else 1
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            class_id = i % num_classes
            cloud = make_instance(kind, class_id, n_points, noise_sigma, rng,
                                  rotation=rotation)
            name = f"{split}_{i:05d}.xyzl"
            save_cloud(out_dir / name, cloud)
            label = class_id if task == "classification" else None
            manifest.entries.append(ManifestEntry(name, label, split))
    save_manifest(manifest)
    return manifest


# ---------------------------------------------------------------------------
# few-shot sampling
# ---------------------------------------------------------------------------


@dataclass
class FewShotTask:
    n_way: int
    k_shot: int
    class_ids: list            # original manifest labels, sorted
    label_map: dict             # original label -> dense [0, n_way)
    train_entries: list
    test_entries: list


def sample_few_shot(manifest: DatasetManifest, n_way: int, k_shot: int,
                    seed: int = 0) -> FewShotTask:
    """N-way K-shot episode: sample classes, then k training instances per
    class, both without replacement; the episode's test set is every
    test-split instance of the sampled classes."""
    if manifest.task != "classification":
        raise ValueError("few-shot sampling needs a classification manifest")
    rng = np.random.default_rng(seed)
    by_class: dict = {}
    for e in manifest.split("train"):
        by_class.setdefault(e.label, []).append(e)
    eligible = sorted(c for c, v in by_class.items() if len(v) >= k_shot)
    if len(eligible) < n_way:
        raise ValueError(
            f"need {n_way} classes with >= {k_shot} train instances, have {len(eligible)}")
    classes = sorted(rng.choice(eligible, size=n_way, replace=False).tolist())
    label_map = {c: i for i, c in enumerate(classes)}
    train = []
    for c in classes:
        picks = rng.choice(len(by_class[c]), size=k_shot, replace=False)
        train.extend(by_class[c][j] for j in sorted(picks))
    test = [e for e in manifest.split("test") if e.label in label_map]
    return FewShotTask(n_way, k_shot, classes, label_map, train, test)
