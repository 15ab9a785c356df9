"""Scan signing and two simple tamper localizers.

Signatures cover the canonical raw serialization (header with dims, spacing and
series id, then every voxel), so any voxel or metadata change invalidates them.
The localizers look at the high-pass noise residual: scanner noise is spatially
white and uniform, so content pasted from elsewhere stands out.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field, replace
import hashlib
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey

from .dicom import DicomElement, DicomSlice
from .errors import MalformedFile
from .pipeline.detector import lung_mask
from .rawio import encode_raw
from .volume import Volume

ALGORITHM = "ed25519-sha256"
SIGNATURE_TAG = (0x7777, 0x0010)
BLOCK = 8
MAD_SCALE = 1.4826
# smoothed-HU band treated as tissue/air transition when estimating noise
STRUCTURE_BAND_HU = (-700.0, -200.0)
LUNG_CLOSE_MM = 8.0
MIN_CLUSTER = 2


# -- signatures -------------------------------------------------------------

@dataclass(frozen=True)
class ScanSignature:
    algorithm: str
    key_id: str
    digest: bytes
    signature: bytes

    def dumps(self) -> str:
        return (
            f"algorithm={self.algorithm}\n"
            f"key_id={self.key_id}\n"
            f"digest={base64.b64encode(self.digest).decode()}\n"
            f"signature={base64.b64encode(self.signature).decode()}\n"
        )

    @classmethod
    def loads(cls, text: str) -> "ScanSignature":
        fields_ = {}
        for line in text.splitlines():
            if line.strip():
                k, sep, v = line.partition("=")
                if not sep:
                    raise MalformedFile(f"bad signature line {line!r}")
                fields_[k.strip()] = v.strip()
        try:
            return cls(fields_["algorithm"], fields_["key_id"],
                       base64.b64decode(fields_["digest"], validate=True),
                       base64.b64decode(fields_["signature"], validate=True))
        except (KeyError, ValueError) as exc:
            raise MalformedFile(f"incomplete signature sidecar: {exc}") from None


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str = ""

    def __bool__(self):
        return self.valid

    def __str__(self):
        return "valid" if self.valid else f"invalid: {self.reason}"


def generate_key(seed: Optional[bytes] = None) -> Ed25519PrivateKey:
    """New signing key; a seed gives a reproducible key (tests and demos only)."""
    if seed is None:
        return Ed25519PrivateKey.generate()
    if isinstance(seed, int):
        seed = str(seed).encode()
    return Ed25519PrivateKey.from_private_bytes(hashlib.sha256(seed).digest())


def key_id(public_key: Ed25519PublicKey) -> str:
    raw = public_key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    return hashlib.sha256(raw).hexdigest()[:16]


def save_private_key(key: Ed25519PrivateKey, path):
    with open(path, "wb") as fh:
        fh.write(key.private_bytes(serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
                                   serialization.NoEncryption()))


def save_public_key(key: Ed25519PublicKey, path):
    with open(path, "wb") as fh:
        fh.write(key.public_bytes(serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo))


def load_private_key(path) -> Ed25519PrivateKey:
    with open(path, "rb") as fh:
        key = serialization.load_pem_private_key(fh.read(), password=None)
    if not isinstance(key, Ed25519PrivateKey):
        raise MalformedFile(f"{path} is not an Ed25519 private key")
    return key


def load_public_key(path) -> Ed25519PublicKey:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        key = serialization.load_pem_public_key(data)
    except ValueError:
        key = serialization.load_pem_private_key(data, password=None).public_key()
    if not isinstance(key, Ed25519PublicKey):
        raise MalformedFile(f"{path} is not an Ed25519 key")
    return key


def scan_digest(volume: Volume) -> bytes:
    return hashlib.sha256(encode_raw(volume)).digest()


def sign_scan(volume: Volume, key: Ed25519PrivateKey) -> ScanSignature:
    digest = scan_digest(volume)
    return ScanSignature(ALGORITHM, key_id(key.public_key()), digest, key.sign(digest))


def verify_scan(volume: Volume, signature: ScanSignature, public_key: Ed25519PublicKey) -> Verdict:
    if signature.algorithm != ALGORITHM:
        return Verdict(False, f"unsupported algorithm {signature.algorithm}")
    if signature.key_id != key_id(public_key):
        return Verdict(False, "signed by a different key")
    if scan_digest(volume) != signature.digest:
        return Verdict(False, "scan content does not match the signed digest")
    try:
        public_key.verify(signature.signature, signature.digest)
    except InvalidSignature:
        return Verdict(False, "signature does not verify")
    return Verdict(True)


def embed_signature(slices: Sequence[DicomSlice], signature: ScanSignature) -> List[DicomSlice]:
    """Copy of the series with the signature sidecar text in a private element of every slice."""
    value = signature.dumps().encode("ascii")
    if len(value) % 2:
        value += b"\x00"
    el = DicomElement(SIGNATURE_TAG, "OB", value)
    return [replace(s, elements=[e for e in s.elements if e.tag != SIGNATURE_TAG] + [el]) for s in slices]


def extract_signature(slices: Sequence[DicomSlice]) -> Optional[ScanSignature]:
    for s in slices:
        el = s.element(SIGNATURE_TAG)
        if el is not None:
            return ScanSignature.loads(el.value.rstrip(b"\x00").decode("ascii"))
    return None


# -- noise-residual localizers --------------------------------------------------

def highpass(voxels) -> np.ndarray:
    """Residual after subtracting the local 3^3 mean."""
    v = np.asarray(voxels, dtype=np.float64)
    return v - ndimage.uniform_filter(v, size=3, mode="nearest")


def robust_scale(values) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        return 0.0
    return MAD_SCALE * float(np.median(np.abs(v - np.median(v))))


@dataclass
class AnomalyMap:
    scores: np.ndarray
    threshold: float
    flagged: List[Tuple[int, int, int]] = field(default_factory=list)
    block: int = BLOCK
    lung_blocks: int = 0

    def flagged_fraction(self) -> float:
        return len(self.flagged) / self.lung_blocks if self.lung_blocks else 0.0

    def block_slices(self, idx):
        return tuple(slice(i * self.block, (i + 1) * self.block) for i in idx)

    def clusters(self) -> List[List[Tuple[int, int, int]]]:
        """Flagged blocks grouped by 26-connectivity, largest group first."""
        labels, n = ndimage.label(self.scores > self.threshold, structure=np.ones((3, 3, 3), dtype=bool))
        groups = [[tuple(int(i) for i in idx) for idx in np.argwhere(labels == k)] for k in range(1, n + 1)]
        return sorted(groups, key=len, reverse=True)

    def suspicious(self, min_cluster: int = MIN_CLUSTER) -> bool:
        """Scan-level verdict: some group of adjacent flagged blocks has ``min_cluster`` members."""
        groups = self.clusters()
        return bool(groups) and len(groups[0]) >= min_cluster

    def intersects(self, slices, min_cluster: int = 1) -> bool:
        for group in self.clusters():
            if len(group) < min_cluster:
                break
            for idx in group:
                if all(b.start < s.stop and s.start < b.stop for b, s in zip(self.block_slices(idx), slices)):
                    return True
        return False


def lung_fields(volume: Volume, close_mm: float = LUNG_CLOSE_MM) -> np.ndarray:
    """Lung mask closed by ``close_mm`` so dense content against the pleura stays inside."""
    lungs = lung_mask(volume)
    if close_mm <= 0 or not lungs.any():
        return lungs
    grown = ndimage.distance_transform_edt(~lungs, sampling=volume.spacing) <= close_mm
    return lungs | (ndimage.distance_transform_edt(grown, sampling=volume.spacing) > close_mm)


def structure_mask(voxels, band=STRUCTURE_BAND_HU) -> np.ndarray:
    """Voxels on tissue/air transitions, where the high-pass residual is anatomy, not noise.

    A voxel qualifies when its sigma=1 smoothed value lies between the parenchyma and
    soft-tissue levels; the band is grown by one voxel to cover the 3^3 residual support.
    """
    smooth = ndimage.gaussian_filter(np.asarray(voxels, dtype=np.float64), 1.0, mode="nearest")
    return ndimage.binary_dilation((smooth > band[0]) & (smooth < band[1]))


def detect_noise_anomaly(volume: Volume, k: float = 4.0, block: int = BLOCK,
                         lung_fraction: float = 0.5, min_valid: float = 0.25,
                         lungs: Optional[np.ndarray] = None) -> AnomalyMap:
    """Score each lung block by how far its noise level departs from the scan-wide level.

    Per block the noise variance is estimated robustly, ``(1.4826 MAD)^2``, from the
    high-pass residual of voxels away from tissue transitions. The score is
    ``|v - median(v)| / (1.4826 MAD(v))`` over all lung blocks with enough usable
    voxels; other blocks score 0. A block is flagged when its score exceeds ``k``.
    """
    vox = np.asarray(volume.voxels, dtype=np.float64)
    lungs = lung_fields(volume) if lungs is None else lungs
    hp = highpass(vox)
    usable = ~structure_mask(vox)
    nb = tuple(n // block for n in vox.shape)
    crop = tuple(slice(0, n * block) for n in nb)

    def blocks(a):
        a = a[crop].reshape(nb[0], block, nb[1], block, nb[2], block)
        return a.transpose(0, 2, 4, 1, 3, 5).reshape(nb + (block ** 3,))

    ok = blocks(usable)
    inside = (blocks(lungs).mean(axis=-1) >= lung_fraction) & (ok.mean(axis=-1) >= min_valid)
    res = np.where(ok[inside], blocks(hp)[inside], np.nan)
    med = np.nanmedian(res, axis=-1, keepdims=True)
    var = (MAD_SCALE * np.nanmedian(np.abs(res - med), axis=-1)) ** 2
    scores = np.zeros(nb)
    if var.size:
        center = float(np.median(var))
        spread = robust_scale(var)
        if spread > 0:
            scores[inside] = np.abs(var - center) / spread
    flagged = [tuple(int(i) for i in idx) for idx in np.argwhere(scores > k)]
    return AnomalyMap(scores, k, flagged, block, int(inside.sum()))


def boundary_discontinuity_score(volume: Volume, slices, dense_hu: float = -400.0,
                                 core_frac: float = 0.5, erode: int = 2) -> float:
    """Mismatch between the noise texture of pasted dense content and its surroundings.

    Compares the robust high-pass scale of dense voxels in the core of the footprint
    (interior only, eroded away from edges) with that of the footprint rim, returning
    ``|log(core / rim)|``. Content generated in place and noised to match the scan scores
    near 0; content carried over from a scan with different noise scores high.
    """
    vox = np.asarray(volume.voxels, dtype=np.float64)
    sub_sl = tuple(slice(max(0, s.start - 1), min(n, s.stop + 1)) for s, n in zip(slices, vox.shape))
    sub = vox[sub_sl]
    hp = highpass(sub)
    off = tuple(s.start - b.start for s, b in zip(slices, sub_sl))
    ext = tuple(s.stop - s.start for s in slices)
    inner = tuple(slice(o, o + e) for o, e in zip(off, ext))
    hp, sub = hp[inner], sub[inner]
    core = np.zeros(ext, dtype=bool)
    core[tuple(slice(int(e * (1 - core_frac) / 2), e - int(e * (1 - core_frac) / 2)) for e in ext)] = True
    dense = ndimage.binary_erosion(sub > dense_hu, iterations=erode) & core
    if dense.sum() < 8:
        return 0.0
    rim = ~ndimage.binary_dilation(core, iterations=2)
    a, b = robust_scale(hp[dense]), robust_scale(hp[rim])
    if a <= 0 or b <= 0:
        return float("inf") if a != b else 0.0
    return abs(float(np.log(a / b)))
