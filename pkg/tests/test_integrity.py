import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctgan_sim import dicom, integrity as ig
from ctgan_sim.errors import MalformedFile
from ctgan_sim.phantom import random_phantom
from ctgan_sim.pipeline.oracle import OracleInpainter
from ctgan_sim.pipeline.splice import build_template_library, splice_attack
from ctgan_sim.pipeline.tamper import TamperConfig, tamper_site
from ctgan_sim.volume import Volume

KEY = ig.generate_key(b"test-key")


@pytest.fixture(scope="module")
def small():
    rng = np.random.default_rng(0)
    return Volume(rng.integers(-1024, 400, (16, 16, 8)).astype(np.int16), (0.7, 0.7, 2.5), "sig")


def test_sign_verify(small):
    sig = ig.sign_scan(small, KEY)
    assert ig.verify_scan(small, sig, KEY.public_key())
    assert str(ig.verify_scan(small, sig, KEY.public_key())) == "valid"


def test_one_voxel_flip(small):
    sig = ig.sign_scan(small, KEY)
    v = np.array(small.voxels)
    v[3, 4, 5] += 1
    verdict = ig.verify_scan(small.with_voxels(v), sig, KEY.public_key())
    assert not verdict and str(verdict).startswith("invalid")


def test_wrong_key(small):
    sig = ig.sign_scan(small, KEY)
    assert not ig.verify_scan(small, sig, ig.generate_key(b"other").public_key())


def test_forged_signature_bytes(small):
    sig = ig.sign_scan(small, KEY)
    forged = ig.ScanSignature(sig.algorithm, sig.key_id, sig.digest, bytes(64))
    assert "does not verify" in str(ig.verify_scan(small, forged, KEY.public_key()))


def test_spacing_and_series_are_covered(small):
    sig = ig.sign_scan(small, KEY)
    assert not ig.verify_scan(Volume(small.voxels, (0.7, 0.7, 2.0), "sig"), sig, KEY.public_key())
    assert not ig.verify_scan(Volume(small.voxels, small.spacing, "other"), sig, KEY.public_key())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 16 * 16 * 8 - 1), st.sampled_from([-1, 1]))
def test_any_flip_detected(small, idx, delta):
    sig = ig.sign_scan(small, KEY)
    v = np.array(small.voxels).ravel()
    v[idx] = v[idx] + delta
    assert not ig.verify_scan(small.with_voxels(v.reshape(small.dims)), sig, KEY.public_key())


def test_sidecar_roundtrip_and_errors(small):
    sig = ig.sign_scan(small, KEY)
    assert ig.ScanSignature.loads(sig.dumps()) == sig
    with pytest.raises(MalformedFile):
        ig.ScanSignature.loads("algorithm=ed25519-sha256\n")
    with pytest.raises(MalformedFile):
        ig.ScanSignature.loads("nonsense")
    with pytest.raises(MalformedFile):
        ig.ScanSignature.loads(sig.dumps().replace("digest=", "digest=!!"))


def test_key_files(tmp_path):
    ig.save_private_key(KEY, tmp_path / "k.pem")
    ig.save_public_key(KEY.public_key(), tmp_path / "k.pub")
    k2 = ig.load_private_key(tmp_path / "k.pem")
    assert ig.key_id(k2.public_key()) == ig.key_id(ig.load_public_key(tmp_path / "k.pub"))
    assert ig.key_id(ig.load_public_key(tmp_path / "k.pem")) == ig.key_id(KEY.public_key())
    assert ig.key_id(ig.generate_key(7).public_key()) == ig.key_id(ig.generate_key(7).public_key())


def test_dicom_embedding(small):
    slices = dicom.split_volume(small)
    sig = ig.sign_scan(small, KEY)
    signed = [dicom.parse_dicom(dicom.write_dicom(s)) for s in ig.embed_signature(slices, sig)]
    got = ig.extract_signature(signed)
    assert got == sig
    assert ig.verify_scan(dicom.assemble_volume(signed), got, KEY.public_key())
    assert ig.extract_signature(slices) is None


# -- noise-anomaly detector ------------------------------------------------------

def test_constant_volume_nothing_flagged():
    v = Volume(np.full((48, 48, 32), -850, np.int16), (1, 1, 1))
    lungs = np.zeros(v.dims, bool)
    lungs[8:40, 8:40, 8:24] = True
    amap = ig.detect_noise_anomaly(v, lungs=lungs)
    assert (amap.scores == 0).all() and amap.flagged == [] and not amap.suspicious()


def test_clean_phantom_low_flag_rate(healthy_phantom):
    amap = ig.detect_noise_anomaly(healthy_phantom)
    assert amap.lung_blocks > 50
    assert amap.flagged_fraction() < 0.01
    assert not amap.suspicious()


@pytest.fixture(scope="module")
def library():
    return build_template_library(4, seed=7)


def test_splice_flagged_at_footprint(library):
    vol, _ = random_phantom(321)
    out, rec = splice_attack(vol, library, seed=5)
    amap = ig.detect_noise_anomaly(out)
    assert amap.suspicious()
    assert amap.intersects(rec.actions[0].slices, min_cluster=2)


def test_block_variance_outlier_scores():
    rng = np.random.default_rng(0)
    vox = rng.normal(-850, 30, (64, 64, 32))
    vox[24:32, 24:32, 8:16] = rng.normal(-850, 5, (8, 8, 8))
    v = Volume(np.rint(vox), (1, 1, 1))
    amap = ig.detect_noise_anomaly(v, lungs=np.ones(v.dims, bool))
    assert (3, 3, 1) in amap.flagged
    assert amap.scores[3, 3, 1] == amap.scores.max()


def test_boundary_score_splice_above_oracle(library):
    vol, _ = random_phantom(55)
    site = (40, 60, 40)
    spliced, rec = splice_attack(vol, library, seed=1, center=site)
    cfg = TamperConfig()
    gan_like, cub, _ = tamper_site(vol, site, OracleInpainter(), cfg, "inject", np.random.default_rng(0))
    sl = rec.actions[0].slices
    assert ig.boundary_discontinuity_score(spliced, sl) > ig.boundary_discontinuity_score(gan_like, sl)


def test_boundary_score_no_dense_content(healthy_phantom):
    assert ig.boundary_discontinuity_score(healthy_phantom, (slice(30, 40),) * 3) == 0.0
