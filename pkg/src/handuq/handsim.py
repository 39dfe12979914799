"""Synthetic hand-joint data with known heteroscedastic, correlated noise.

A stylized 21-joint skeleton (wrist root + 5 fingers x 4 joints) is posed
by per-joint flexion angles and rendered to 3D positions by chained rigid
transforms.  Observed targets are the clean positions plus Gaussian noise
whose covariance couples joints within each finger through a shared latent
and scales with an occlusion value that is also part of the input
features -- so the noise level is inferable from the input and the
generative covariance serves as a calibration oracle.

Segment lengths are canonical values in meters chosen for plausible hand
proportions; no anthropometric accuracy is claimed.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import gaussian_core
from .errors import KinematicsError, ParseError, ShapeError

NUM_FINGERS = 5
JOINTS_PER_FINGER = 4
TRIL_SIZE = gaussian_core.FLAT_DIM * (gaussian_core.FLAT_DIM + 1) // 2  # 2016
FEATURE_DIM = 2 * gaussian_core.NUM_JOINTS + 1  # clean 2D projection + occlusion

DATASET_FORMAT = "handuq.dataset.v1"

# canonical segment lengths (m), one row per finger
# (thumb, index, middle, ring, pinky) x (base, proximal, middle, distal)
_SEGMENT_LENGTHS = np.array(
    [
        [0.040, 0.032, 0.022, 0.020],
        [0.075, 0.040, 0.022, 0.019],
        [0.072, 0.045, 0.025, 0.020],
        [0.068, 0.040, 0.023, 0.019],
        [0.064, 0.030, 0.018, 0.016],
    ]
)

# in-plane fan angles of the finger base directions (rad)
_BASE_ANGLES = np.array([0.90, 0.35, 0.0, -0.35, -0.75])


@dataclass(frozen=True)
class HandSkeleton:
    """Wrist-rooted kinematic tree: 5 chains of 4 segments each."""

    segment_lengths: np.ndarray  # (5, 4), m
    base_angles: np.ndarray  # (5,), rad, direction of each finger in the palm plane
    angle_lo: np.ndarray  # (5, 4), rad
    angle_hi: np.ndarray  # (5, 4), rad

    def __post_init__(self):
        for name, shape in (
            ("segment_lengths", (5, 4)),
            ("base_angles", (5,)),
            ("angle_lo", (5, 4)),
            ("angle_hi", (5, 4)),
        ):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name} must have shape {shape}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.segment_lengths <= 0):
            raise ValueError("segment lengths must be > 0")
        if np.any(self.angle_lo > self.angle_hi):
            raise ValueError("angle limits must satisfy lo <= hi")

    @classmethod
    def canonical(cls) -> "HandSkeleton":
        return cls(
            segment_lengths=_SEGMENT_LENGTHS,
            base_angles=_BASE_ANGLES,
            angle_lo=np.full((5, 4), -0.25),
            angle_hi=np.full((5, 4), 1.60),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.segment_lengths, self.base_angles, self.angle_lo, self.angle_hi):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:12]


def forward_kinematics(skeleton: HandSkeleton, angles) -> np.ndarray:
    """Joint positions (63,) for per-joint flexion angles of shape (5, 4).

    The wrist sits at the origin.  Each finger extends along its base
    direction in the x-y plane; flexion at joint k rotates all segments
    from k on toward -z, so segment k's direction uses the cumulative
    angle sum over joints 1..k of that finger.
    """
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (NUM_FINGERS, JOINTS_PER_FINGER):
        raise ShapeError(f"angles must have shape (5, 4), got {angles.shape}")
    if np.any(angles < skeleton.angle_lo) or np.any(angles > skeleton.angle_hi):
        raise KinematicsError("angles outside skeleton limits")
    joints = np.zeros((gaussian_core.NUM_JOINTS, 3))
    for f in range(NUM_FINGERS):
        phi = skeleton.base_angles[f]
        u = np.array([np.cos(phi), np.sin(phi), 0.0])
        theta = np.cumsum(angles[f])
        # rotation of u about the in-plane perpendicular axis lands on:
        dirs = np.cos(theta)[:, None] * u - np.sin(theta)[:, None] * np.array([0.0, 0.0, 1.0])
        pos = np.cumsum(skeleton.segment_lengths[f][:, None] * dirs, axis=0)
        joints[1 + 4 * f : 5 + 4 * f] = pos
    return joints.reshape(-1)


@dataclass(frozen=True)
class NoiseProfile:
    """Generative noise: scale (1 + occ_gain * occ) * base_var on a
    within-finger correlated base covariance.

    ``coupling`` is the weight of the shared per-finger latent relative to
    the per-coordinate independent component.  ``fixed_occ`` pins the
    occlusion value instead of drawing it (the draw still happens so the
    pose and noise streams stay aligned across profiles).
    """

    base_var: float = 1e-4
    occ_gain: float = 4.0
    coupling: float = 0.8
    fixed_occ: float | None = None

    def __post_init__(self):
        if self.base_var < 0:
            raise ValueError("base_var must be >= 0")
        if self.occ_gain < 0:
            raise ValueError("occ_gain must be >= 0")
        if self.fixed_occ is not None and not 0.0 <= self.fixed_occ <= 1.0:
            raise ValueError("fixed_occ must lie in [0, 1]")


def noise_mixing_matrix(coupling: float) -> np.ndarray:
    """Mixing L (63 x 68): per-finger shared-latent column plus a diagonal.

    The wrist block (first 3 dims) has only the independent component;
    each finger block of 12 dims adds one shared column with entries
    ``coupling``.  The implied base covariance L @ L.T is block diagonal
    over fingers and positive definite.
    """
    d = gaussian_core.FLAT_DIM
    cols = d + NUM_FINGERS
    mix = np.zeros((d, cols))
    mix[:, :d] = np.eye(d)
    for f in range(NUM_FINGERS):
        rows = slice(3 + 12 * f, 3 + 12 * (f + 1))
        mix[rows, d + f] = coupling
    return mix


@dataclass
class SyntheticSample:
    """One record: input features, noisy target joints, and the generative
    noise covariance that acts as the calibration oracle."""

    id: int
    features: np.ndarray  # (43,) clean 2D projection + occlusion
    gt_joints: np.ndarray  # (63,) clean positions + correlated noise
    noise_cov: np.ndarray  # (63, 63) generative covariance, symmetric PD
    occlusion: float


def _sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    # split by sample id so generation is order-independent and parallel-safe
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(sample_id,)))


def generate(
    skeleton: HandSkeleton,
    n: int,
    seed: int,
    profile: NoiseProfile | None = None,
) -> list[SyntheticSample]:
    """Draw n samples: random pose within limits, occlusion ~ U[0,1],
    noise ~ N(0, (1 + occ_gain*occ) * base_var * L L^T)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    profile = profile or NoiseProfile()
    mix = noise_mixing_matrix(profile.coupling)
    base_cov = mix @ mix.T
    lo, hi = skeleton.angle_lo, skeleton.angle_hi
    samples = []
    for i in range(n):
        rng = _sample_rng(seed, i)
        angles = lo + (hi - lo) * rng.random((NUM_FINGERS, JOINTS_PER_FINGER))
        occ = float(rng.random())
        if profile.fixed_occ is not None:
            occ = profile.fixed_occ
        xi = rng.standard_normal(mix.shape[1])
        clean = forward_kinematics(skeleton, angles)
        scale = (1.0 + profile.occ_gain * occ) * profile.base_var
        noise = np.sqrt(scale) * (mix @ xi)
        features = np.concatenate([clean.reshape(-1, 3)[:, :2].reshape(-1), [occ]])
        samples.append(
            SyntheticSample(
                id=i,
                features=features,
                gt_joints=clean + noise,
                noise_cov=scale * base_cov,
                occlusion=occ,
            )
        )
    return samples


def oracle_uncertainty(sample: SyntheticSample) -> np.ndarray:
    """Best-achievable per-joint uncertainty: trace of each 3x3 block of
    the generative covariance."""
    return gaussian_core.block_traces(sample.noise_cov)


def pack_tril(matrix: np.ndarray) -> np.ndarray:
    """Lower triangle of a symmetric (63, 63) matrix, row-major, (2016,)."""
    d = gaussian_core.FLAT_DIM
    if matrix.shape != (d, d):
        raise ShapeError(f"expected ({d}, {d}) matrix, got {matrix.shape}")
    idx = np.tril_indices(d)
    return np.asarray(matrix, dtype=np.float64)[idx]


def unpack_tril(packed: np.ndarray) -> np.ndarray:
    """Inverse of `pack_tril`; mirrors the lower triangle up."""
    d = gaussian_core.FLAT_DIM
    packed = np.asarray(packed, dtype=np.float64)
    if packed.shape != (TRIL_SIZE,):
        raise ShapeError(f"expected ({TRIL_SIZE},) vector, got {packed.shape}")
    out = np.zeros((d, d))
    out[np.tril_indices(d)] = packed
    return out + np.tril(out, -1).T


def save_dataset(path, samples: list[SyntheticSample], skeleton_hash: str) -> None:
    """One record per line:
    id, features[43], gt_joints[63], occlusion, noise_cov_packed[2016].

    Floats are written with repr so files are byte-stable and re-parse to
    the exact same values.
    """
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"#{DATASET_FORMAT} skeleton={skeleton_hash}\n")
        for s in samples:
            fields = [str(s.id)]
            fields.extend(repr(v) for v in s.features)
            fields.extend(repr(v) for v in s.gt_joints)
            fields.append(repr(s.occlusion))
            fields.extend(repr(v) for v in pack_tril(s.noise_cov))
            fh.write(",".join(fields))
            fh.write("\n")


def load_dataset(path, with_noise_cov: bool = True) -> tuple[list[SyntheticSample], dict]:
    """Parse a dataset file; returns (samples, header metadata).

    ``with_noise_cov=False`` skips converting the packed covariance (the
    training path does not need it), leaving ``noise_cov=None``.
    """
    n_fixed = 1 + FEATURE_DIM + gaussian_core.FLAT_DIM + 1
    samples = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().rstrip("\n")
        if not header.startswith(f"#{DATASET_FORMAT}"):
            raise ParseError(f"unrecognized dataset header: {header!r}", line=1)
        meta = {}
        for tok in header.split()[1:]:
            key, _, val = tok.partition("=")
            meta[key] = val
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != n_fixed + TRIL_SIZE:
                raise ParseError(
                    f"expected {n_fixed + TRIL_SIZE} fields, got {len(parts)}", line=lineno
                )
            try:
                sid = int(parts[0])
                head = np.array(parts[1:n_fixed], dtype=np.float64)
                cov = None
                if with_noise_cov:
                    cov = unpack_tril(np.array(parts[n_fixed:], dtype=np.float64))
            except ValueError as exc:
                raise ParseError(f"bad numeric field ({exc})", line=lineno) from exc
            features = head[:FEATURE_DIM]
            gt = head[FEATURE_DIM : FEATURE_DIM + gaussian_core.FLAT_DIM]
            samples.append(
                SyntheticSample(
                    id=sid,
                    features=features,
                    gt_joints=gt,
                    noise_cov=cov,
                    occlusion=float(head[-1]),
                )
            )
    return samples, meta


def feature_matrix(samples: list[SyntheticSample]) -> np.ndarray:
    return np.stack([s.features for s in samples])


def target_matrix(samples: list[SyntheticSample]) -> np.ndarray:
    return np.stack([s.gt_joints for s in samples])
