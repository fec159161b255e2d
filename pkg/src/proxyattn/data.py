"""Skeletons, pose sequence containers, synthetic motion, and dataset I/O.

3D poses are stored root-relative in millimeters; 2D poses in normalized
image coordinates in [-1, 1].  The synthetic generator builds smooth
sinusoidal motion on a canonical 17-joint skeleton and projects it through
a fixed pinhole camera, persisting the root trajectory and intrinsics so
the 2D/3D consistency can be re-verified from disk alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Rng
from .tensor_io import (ShapeMismatchError, load_tensor, load_tensor_json,
                        save_tensor, save_tensor_json)


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple[str, ...]
    parents: tuple[int, ...]
    flip_pairs: tuple[tuple[int, int], ...]
    root_index: int = 0

    def __post_init__(self):
        n = len(self.joint_names)
        if len(self.parents) != n:
            raise ValueError("parents and joint_names lengths differ")
        seen = set()
        for a, b in self.flip_pairs:
            if a in seen or b in seen or a == b:
                raise ValueError(f"flip pair ({a}, {b}) reuses a joint")
            seen.update((a, b))
        # every joint must reach the root without cycles
        for j in range(n):
            hops, k = 0, j
            while k != self.root_index:
                k = self.parents[k]
                if k < 0:
                    raise ValueError(f"joint {j} does not reach the root")
                hops += 1
                if hops > n:
                    raise ValueError(f"cycle in parents at joint {j}")

    @property
    def joints(self) -> int:
        return len(self.joint_names)

    def to_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "parents": list(self.parents),
            "flip_pairs": [list(p) for p in self.flip_pairs],
            "root_index": self.root_index,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Skeleton":
        return cls(
            joint_names=tuple(doc["joint_names"]),
            parents=tuple(doc["parents"]),
            flip_pairs=tuple((int(a), int(b)) for a, b in doc["flip_pairs"]),
            root_index=int(doc["root_index"]),
        )


_H36M17_NAMES = (
    "pelvis", "hip_r", "knee_r", "ankle_r", "hip_l", "knee_l", "ankle_l",
    "spine", "thorax", "neck", "head",
    "shoulder_l", "elbow_l", "wrist_l", "shoulder_r", "elbow_r", "wrist_r",
)
_H36M17_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
_H36M17_FLIP_PAIRS = ((1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16))

# Rest pose in millimeters, pelvis at origin; +x is the subject's left.
_H36M17_REST = np.array([
    [0.0, 0.0, 0.0],        # pelvis
    [-130.0, 0.0, 0.0],     # hip_r
    [-130.0, -450.0, 0.0],  # knee_r
    [-130.0, -900.0, 0.0],  # ankle_r
    [130.0, 0.0, 0.0],      # hip_l
    [130.0, -450.0, 0.0],   # knee_l
    [130.0, -900.0, 0.0],   # ankle_l
    [0.0, 230.0, -20.0],    # spine
    [0.0, 460.0, -20.0],    # thorax
    [0.0, 570.0, 0.0],      # neck
    [0.0, 730.0, 20.0],     # head
    [180.0, 440.0, 0.0],    # shoulder_l
    [300.0, 180.0, 0.0],    # elbow_l
    [380.0, -60.0, 0.0],    # wrist_l
    [-180.0, 440.0, 0.0],   # shoulder_r
    [-300.0, 180.0, 0.0],   # elbow_r
    [-380.0, -60.0, 0.0],   # wrist_r
])


def default_h36m17_skeleton() -> Skeleton:
    """The common 17-joint skeleton (pelvis root, paired limbs)."""
    return Skeleton(_H36M17_NAMES, _H36M17_PARENTS, _H36M17_FLIP_PAIRS, 0)


def rest_pose(skeleton: Skeleton) -> np.ndarray:
    """Canonical rest pose in millimeters for the default skeleton."""
    if skeleton.joint_names != _H36M17_NAMES:
        raise ValueError("rest_pose is only defined for the default 17-joint skeleton")
    return _H36M17_REST.copy()


@dataclass
class PoseSequence2D:
    """(T, J, C) keypoints in [-1, 1] image coordinates; C may include a
    third confidence channel."""

    data: np.ndarray
    skeleton: Skeleton

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] not in (2, 3):
            raise ValueError(f"2D pose data must be (T, J, 2|3), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("sequence must have at least one frame")
        if not np.isfinite(self.data).all():
            raise ValueError("2D pose data contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


@dataclass
class PoseSequence3D:
    """(T, J, 3) joints in millimeters, root-relative unless flagged."""

    data: np.ndarray
    skeleton: Skeleton
    root_relative: bool = True

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"3D pose data must be (T, J, 3), got {self.data.shape}")
        if self.data.shape[0] < 1:
            raise ValueError("sequence must have at least one frame")
        if not np.isfinite(self.data).all():
            raise ValueError("3D pose data contains non-finite values")
        if self.root_relative:
            root = self.data[:, self.skeleton.root_index, :]
            if np.abs(root).max() > 1e-6:
                raise ValueError("root joint must sit at the origin in a root-relative sequence")

    @property
    def frames(self) -> int:
        return self.data.shape[0]


def horizontal_flip(seq):
    """Mirror a pose sequence: negate x, swap each left/right joint pair.

    Exact involution; confidence channels (if any) are left untouched."""
    pairs = seq.skeleton.flip_pairs
    if not pairs:
        raise ValueError("skeleton has no flip_pairs; cannot flip")
    flipped = flip_array(seq.data, pairs)
    if isinstance(seq, PoseSequence2D):
        return PoseSequence2D(flipped, seq.skeleton)
    return PoseSequence3D(flipped, seq.skeleton, root_relative=seq.root_relative)


def flip_array(data: np.ndarray, pairs) -> np.ndarray:
    """Array-level flip used for both sequences and model outputs."""
    out = data.copy()
    for a, b in pairs:
        out[:, [a, b]] = out[:, [b, a]]
    out[..., 0] = -out[..., 0]
    return out


# ---------------------------------------------------------------------------
# Windowing
# ---------------------------------------------------------------------------


@dataclass
class Window:
    """A fixed-length view of a sequence; `padded` counts trailing frames
    filled by edge replication (0 means the window is an exact slice)."""

    data: np.ndarray
    start: int
    padded: int = 0

    @property
    def is_padded(self) -> bool:
        return self.padded > 0


def window_offsets(total: int, length: int, stride: int) -> list[tuple[int, int]]:
    """(start, padded_frames) pairs covering a sequence of `total` frames."""
    if length > total:
        raise ValueError(f"window length {length} exceeds sequence length {total}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    offsets = []
    start = 0
    while start + length <= total:
        offsets.append((start, 0))
        start += stride
    covered = offsets[-1][0] + length
    if covered < total:
        offsets.append((start, start + length - total))
    return offsets


def window_split(data: np.ndarray, length: int, stride: int) -> list[Window]:
    """Slice a (T, ...) array into fixed-length windows at multiples of
    `stride`; a trailing partial window is edge-replicated and flagged."""
    windows = []
    for start, pad in window_offsets(data.shape[0], length, stride):
        if pad == 0:
            windows.append(Window(data[start : start + length].copy(), start))
        else:
            chunk = data[start:]
            fill = np.repeat(chunk[-1:], pad, axis=0)
            windows.append(Window(np.concatenate([chunk, fill], axis=0), start, pad))
    return windows


# ---------------------------------------------------------------------------
# Camera and synthetic motion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    focal_px: float = 1000.0
    image_size: tuple[int, int] = (1000, 1000)
    subject_distance_mm: float = 4000.0

    def project_normalized(self, points_mm: np.ndarray) -> np.ndarray:
        """Project camera-space points (mm, z forward) to [-1, 1] coords."""
        w, h = self.image_size
        x = self.focal_px * points_mm[..., 0] / points_mm[..., 2]
        y = self.focal_px * points_mm[..., 1] / points_mm[..., 2]
        return np.stack([x / (w / 2.0), y / (h / 2.0)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "focal_px": self.focal_px,
            "image_size": list(self.image_size),
            "subject_distance_mm": self.subject_distance_mm,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PinholeCamera":
        return cls(float(doc["focal_px"]), tuple(doc["image_size"]),
                   float(doc["subject_distance_mm"]))


@dataclass
class MotionParams:
    """Sinusoidal motion shaping for the synthetic generator.

    Each joint moves relative to its parent with its own per-axis
    amplitude, frequency and phase; per-bone amplitudes are capped at a
    fraction of the bone length so bone lengths never drift more than
    ~5%.  The root trajectory (capped separately) becomes the global
    translation and never affects root-relative coordinates."""

    root_amplitude_mm: float = 100.0
    bone_amplitude_frac: float = 0.049
    cycles_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        if self.root_amplitude_mm < 0 or not (0 <= self.bone_amplitude_frac < 0.05001):
            raise ValueError("invalid motion parameters: amplitudes out of range")
        if not (0 < self.cycles_range[0] <= self.cycles_range[1]):
            raise ValueError(f"invalid cycles_range {self.cycles_range}")


@dataclass
class SequenceRecord:
    seq_id: str
    pose2d: str
    pose3d: str
    global_track: str
    frames: int
    joints: int


@dataclass
class DatasetManifest:
    """Index of a generated dataset: sequence records plus the shared
    skeleton and camera. Paths are stems relative to the manifest file."""

    root: Path
    skeleton: Skeleton
    camera: PinholeCamera
    sequences: list[SequenceRecord]
    split: str = "train"

    def save(self) -> Path:
        doc = {
            "format": 1,
            "split": self.split,
            "skeleton": self.skeleton.to_dict(),
            "camera": self.camera.to_dict(),
            "sequences": [
                {
                    "id": r.seq_id,
                    "pose2d": r.pose2d,
                    "pose3d": r.pose3d,
                    "global": r.global_track,
                    "frames": r.frames,
                    "joints": r.joints,
                }
                for r in self.sequences
            ],
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"missing manifest {path}")
        doc = json.loads(path.read_text())
        manifest = cls(
            root=root,
            skeleton=Skeleton.from_dict(doc["skeleton"]),
            camera=PinholeCamera.from_dict(doc["camera"]),
            sequences=[
                SequenceRecord(s["id"], s["pose2d"], s["pose3d"], s["global"],
                               int(s["frames"]), int(s["joints"]))
                for s in doc["sequences"]
            ],
            split=doc.get("split", "train"),
        )
        for rec in manifest.sequences:
            p2, _ = load_tensor(root / rec.pose2d)
            p3, _ = load_tensor(root / rec.pose3d)
            if p2.shape[0] != rec.frames or p2.shape[1] != rec.joints:
                raise ShapeMismatchError(
                    f"{rec.seq_id}: 2D file shape {p2.shape} disagrees with manifest "
                    f"({rec.frames} frames, {rec.joints} joints)")
            if p3.shape != (rec.frames, rec.joints, 3):
                raise ShapeMismatchError(
                    f"{rec.seq_id}: 3D file shape {p3.shape} disagrees with manifest")
        return manifest

    def load_pair(self, rec: SequenceRecord) -> tuple[PoseSequence2D, PoseSequence3D]:
        p2, _ = load_tensor(self.root / rec.pose2d)
        p3, _ = load_tensor(self.root / rec.pose3d)
        return (PoseSequence2D(p2, self.skeleton),
                PoseSequence3D(p3, self.skeleton))

    def load_global(self, rec: SequenceRecord) -> np.ndarray:
        track, _ = load_tensor(self.root / rec.global_track)
        return track

    def verify_reprojection(self, tol: float = 1e-9) -> float:
        """Re-project every stored 3D sequence and compare with the stored
        2D coordinates; returns the max absolute deviation."""
        worst = 0.0
        for rec in self.sequences:
            p2, p3 = self.load_pair(rec)
            glob = self.load_global(rec)
            reproj = self.camera.project_normalized(p3.data + glob[:, None, :])
            dev = float(np.abs(reproj - p2.data[..., :2]).max())
            worst = max(worst, dev)
            if dev > tol:
                raise ValueError(f"{rec.seq_id}: reprojection deviates by {dev:.3e} (> {tol:.1e})")
        return worst


def synth_generate(
    rng: Rng,
    n_sequences: int,
    frames: int,
    skeleton: Skeleton,
    out_dir,
    motion: MotionParams | None = None,
    camera: PinholeCamera | None = None,
    split: str = "train",
) -> DatasetManifest:
    """Generate sinusoidal-motion sequences and write them to `out_dir`.

    Every joint oscillates around its rest offset from its parent with a
    per-axis random sinusoid; the offsets accumulate down the kinematic
    tree, so bone lengths stay within the configured fraction of rest
    length.  2D views come from pinhole projection of the 3D pose plus a
    global (root) trajectory in front of the camera.
    """
    if frames < 2:
        raise ValueError(f"synthetic sequences need at least 2 frames, got {frames}")
    motion = motion or MotionParams()
    camera = camera or PinholeCamera()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rest = rest_pose(skeleton)
    j = skeleton.joints
    t_axis = np.arange(frames)[:, None]  # (T, 1) broadcast against axes
    records = []
    for s in range(n_sequences):
        seq_id = f"seq{s:04d}"
        # per joint, per axis: amplitude, frequency (cycles over the clip), phase
        amp_cap = np.empty(j)
        for k in range(j):
            if k == skeleton.root_index:
                amp_cap[k] = motion.root_amplitude_mm
            else:
                bone = np.linalg.norm(rest[k] - rest[skeleton.parents[k]])
                amp_cap[k] = min(motion.root_amplitude_mm, motion.bone_amplitude_frac * bone)
        amps = rng.uniform(0.0, 1.0, (j, 3)) * (amp_cap[:, None] / math.sqrt(3.0))
        cycles = rng.uniform(*motion.cycles_range, (j, 3))
        phases = rng.uniform(0.0, 2.0 * math.pi, (j, 3))
        # (T, J, 3) relative sinusoid per joint
        offsets = amps * np.sin(2.0 * math.pi * cycles * t_axis[..., None] / frames + phases)

        # accumulate down the tree: child position = parent + rest bone + own offset
        pos = np.zeros((frames, j, 3))
        order = _topological_joints(skeleton)
        for k in order:
            if k == skeleton.root_index:
                continue
            parent = skeleton.parents[k]
            pos[:, k] = pos[:, parent] + (rest[k] - rest[parent]) + offsets[:, k]
        # root-relative by construction (root stays at the origin)

        glob = offsets[:, skeleton.root_index] + np.array(
            [0.0, 0.0, camera.subject_distance_mm])
        p2 = camera.project_normalized(pos + glob[:, None, :])

        save_tensor(out_dir / f"{seq_id}_2d", p2, extra={"kind": "pose2d"})
        save_tensor(out_dir / f"{seq_id}_3d", pos, extra={"kind": "pose3d"})
        save_tensor(out_dir / f"{seq_id}_glob", glob, extra={"kind": "global"})
        records.append(SequenceRecord(seq_id, f"{seq_id}_2d", f"{seq_id}_3d",
                                      f"{seq_id}_glob", frames, j))

    manifest = DatasetManifest(out_dir, skeleton, camera, records, split)
    manifest.save()
    return manifest


def _topological_joints(skeleton: Skeleton) -> list[int]:
    """Joints ordered so parents precede children."""
    order, placed = [], set()
    pending = list(range(skeleton.joints))
    while pending:
        rest_pending = []
        for k in pending:
            if k == skeleton.root_index or skeleton.parents[k] in placed:
                order.append(k)
                placed.add(k)
            else:
                rest_pending.append(k)
        pending = rest_pending
    return order


def bone_lengths(pose: np.ndarray, skeleton: Skeleton) -> np.ndarray:
    """(T, J) bone lengths (root entry is zero)."""
    lengths = np.zeros(pose.shape[:2])
    for k in range(skeleton.joints):
        if k == skeleton.root_index:
            continue
        lengths[:, k] = np.linalg.norm(pose[:, k] - pose[:, skeleton.parents[k]], axis=-1)
    return lengths


# ---------------------------------------------------------------------------
# Single-sequence file I/O
# ---------------------------------------------------------------------------


def save_sequence(seq, stem) -> None:
    """Write one sequence as a sidecar+binary tensor pair."""
    kind = "pose2d" if isinstance(seq, PoseSequence2D) else "pose3d"
    save_tensor(stem, seq.data, extra={"kind": kind})


def save_sequence_json(seq, path) -> None:
    kind = "pose2d" if isinstance(seq, PoseSequence2D) else "pose3d"
    save_tensor_json(path, seq.data, extra={"kind": kind})


def load_sequence(path, skeleton: Skeleton):
    """Load a sequence from a sidecar pair stem or a pure-JSON file.

    The stored `kind` field picks the container type; files without one
    fall back on the trailing channel count (3 means pose3d)."""
    path = Path(path)
    if path.suffix == ".json" and "data" in json.loads(path.read_text()):
        arr, meta = load_tensor_json(path)
    else:
        stem = str(path)
        if path.suffix in (".json", ".bin"):
            stem = stem[: -len(path.suffix)]
        arr, meta = load_tensor(stem)
    kind = meta.get("kind")
    if kind is None:
        kind = "pose3d" if arr.shape[-1] == 3 else "pose2d"
    if kind == "pose2d":
        return PoseSequence2D(arr, skeleton)
    if kind == "pose3d":
        return PoseSequence3D(arr, skeleton)
    raise ValueError(f"{path}: unknown sequence kind {kind!r}")
