"""Acceptance properties of the toolkit, one test per property.

Each test prints a single ``criterion N: PASS|FAIL`` line with the measured
quantity (run with ``-s`` to see them) and then asserts it.
"""
import logging
import os
import socket
import struct
import time

import numpy as np
import pytest
from scipy import ndimage

from ctgan_sim import dicom, integrity as ig
from ctgan_sim.errors import CTGanSimError
from ctgan_sim.gan import layers as L
from ctgan_sim.gan.augment import N_VARIANTS, iter_augmented
from ctgan_sim.gan.networks import ArchConfig, paper_scale_counts
from ctgan_sim.gan.training import MASK_HI, MASK_LO, TrainConfig, Trainer, reconstruction_error, snapshot
from ctgan_sim.pacs.bridge import Bridge, CaptureLog, tamper_hook
from ctgan_sim.pacs.client import retrieve, send
from ctgan_sim.pacs.server import PacsServer
from ctgan_sim.phantom import generate_dataset, random_phantom
from ctgan_sim.pipeline.detector import detect_nodules
from ctgan_sim.pipeline.localize import locate_candidates, neighborhood_mean
from ctgan_sim.pipeline.oracle import GanInpainter, OracleInpainter
from ctgan_sim.pipeline.splice import build_template_library, splice_attack
from ctgan_sim.pipeline.tamper import TamperConfig, changed_outside, inject, remove, tamper_site
from ctgan_sim.pipeline.touchup import compute_weight, merge
from ctgan_sim.preprocess import denormalize, inverse_preprocess, normalize, preprocess, psnr, Cube, EQUALIZED
from ctgan_sim.preprocess import PreprocessContext
from ctgan_sim.rawio import decode_raw
from ctgan_sim.volume import cut_cuboid

from conftest import FIXTURES


def verdict(n, ok, detail):
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, detail


def same_params(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


# -- 1. gradient correctness ------------------------------------------------------------------

def rel_error(a, n):
    a, n = np.ravel(a), np.ravel(n)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)
    return float(np.max(np.abs(a - n) / scale))


def numeric(f, x, eps=1e-4):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 2e-2 * np.sign(x + 1e-12), x)


def check_conv(rng):
    n, c, f = (int(v) for v in rng.integers(1, 3, 3))
    k = int(rng.choice([1, 2, 3, 4]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, k))
    size = int(rng.integers(k, k + 3))
    x, w, b = rng.normal(size=(n, c, size, size, size)), rng.normal(size=(f, c, k, k, k)), rng.normal(size=f)
    out, cache = L.conv3d_forward(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    grads = L.conv3d_backward(r, cache)
    loss = lambda: float((L.conv3d_forward(x, w, b, stride, pad)[0] * r).sum())
    return max(rel_error(g, numeric(loss, p)) for g, p in zip(grads, (x, w, b)))


def check_deconv(rng):
    cin, cout, n = (int(v) for v in rng.integers(1, 3, 3))
    k = int(rng.choice([2, 3, 4]))
    stride = int(rng.choice([1, 2]))
    pad = (int(rng.integers(0, k // 2 + 1)), int(rng.integers(0, k // 2 + 1)))
    size = int(rng.integers(1, 4))
    x, w, b = rng.normal(size=(n, cin, size, size, size)), rng.normal(size=(cin, cout, k, k, k)), rng.normal(size=cout)
    out, cache = L.deconv3d_forward(x, w, b, stride, pad)
    r = rng.normal(size=out.shape)
    grads = L.deconv3d_backward(r, cache)
    loss = lambda: float((L.deconv3d_forward(x, w, b, stride, pad)[0] * r).sum())
    return max(rel_error(g, numeric(loss, p)) for g, p in zip(grads, (x, w, b)))


def check_norm(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), 2, int(rng.integers(2, 4)), int(rng.integers(2, 4)))
    x = rng.normal(size=shape) * 3 + 1
    gamma, beta = rng.normal(size=shape[1]), rng.normal(size=shape[1])
    out, cache = L.norm_forward(x, gamma, beta)
    r = rng.normal(size=out.shape)
    grads = L.norm_backward(r, cache)
    loss = lambda: float((L.norm_forward(x, gamma, beta)[0] * r).sum())
    return max(rel_error(g, numeric(loss, p)) for g, p in zip(grads, (x, gamma, beta)))


def activation_check(fwd, bwd):
    def check(rng):
        shape = tuple(int(v) for v in rng.integers(1, 4, 5))
        x = away_from_kinks(rng, shape) * 2
        out, cache = fwd(x)
        r = rng.normal(size=out.shape)
        return rel_error(bwd(r, cache), numeric(lambda: float((fwd(x)[0] * r).sum()), x))
    return check


def check_dropout(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, 5))
    x = rng.normal(size=shape)
    mask_seed = int(rng.integers(1 << 30))
    rate = float(rng.uniform(0.1, 0.7))
    out, keep = L.dropout_forward(x, rate, np.random.default_rng(mask_seed))
    r = rng.normal(size=out.shape)
    loss = lambda: float((L.dropout_forward(x, rate, np.random.default_rng(mask_seed))[0] * r).sum())
    return rel_error(L.dropout_backward(r, keep), numeric(loss, x))


def check_bce(rng):
    z = rng.normal(size=int(rng.integers(1, 20))) * 4
    label = float(rng.choice([0.0, 1.0]))
    _, dz = L.bce_with_logit(z, label)
    return rel_error(dz, numeric(lambda: float(L.bce_with_logit(z, label)[0].sum()), z))


PRIMITIVES = {
    "conv3d": check_conv,
    "deconv3d": check_deconv,
    "norm": check_norm,
    "relu": activation_check(L.relu_forward, L.relu_backward),
    "leaky_relu": activation_check(L.leaky_relu_forward, L.leaky_relu_backward),
    "tanh": activation_check(L.tanh_forward, L.tanh_backward),
    "sigmoid": activation_check(L.sigmoid_forward, L.sigmoid_backward),
    "dropout": check_dropout,
    "bce_with_logit": check_bce,
}


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for k, (name, check) in enumerate(PRIMITIVES.items()):
        rng = np.random.default_rng([1, k])
        worst[name] = max(check(rng) for _ in range(20))
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-3 and elapsed < 60
    verdict(1, ok, f"{len(worst)} primitives x 20 shapes, max rel err {worst[top]:.2e} ({top}), {elapsed:.1f}s")


# -- 2. training-loop contract ----------------------------------------------------------------

def test_c02_training_loop_contract():
    arch = ArchConfig(filters=1)
    x = np.random.default_rng(0).uniform(-1, 1, (1, 32, 32, 32)).astype(np.float32)
    tr = Trainer(x, TrainConfig.toy(batch_size=1, iterations=1), arch=arch)
    x_star, x_r = tr.batch()
    g0 = snapshot(tr.generator.params)
    tr.train_d_real(x_star, x_r)
    tr.train_d_fake(x_star)
    d_before_g = snapshot(tr.discriminator.params)
    g_unchanged_by_d = same_params(g0, tr.generator.params)
    tr.train_g(x_star, x_r)
    d_untouched = same_params(d_before_g, tr.discriminator.params)
    ok = tr.opt_d.steps == 2 and tr.opt_g.steps == 1 and d_untouched and g_unchanged_by_d \
        and not same_params(g0, tr.generator.params)
    verdict(2, ok, f"theta_d updates {tr.opt_d.steps}, theta_g updates {tr.opt_g.steps}, "
                   f"theta_d unchanged by generator phase: {d_untouched}")


# -- 3. toy GAN convergence (trained model shared with 10) ------------------------------------

@pytest.fixture(scope="module")
def toy_training():
    samples = np.stack([s.cube for s in generate_dataset(16, (10, 16), seed=0)]).astype(np.float32)
    cfg = TrainConfig.toy(seed=0)
    runs = []
    for _ in range(2):
        t0 = time.perf_counter()
        tr = Trainer(samples, cfg)
        first = []
        tr.run(callback=lambda i, t: first.append(reconstruction_error(t.generator, samples)) if i == 0 else None)
        runs.append(dict(trainer=tr, first=first[0], last=reconstruction_error(tr.generator, samples),
                         seconds=time.perf_counter() - t0))
    return samples, cfg, runs


@pytest.mark.slow
def test_c03_toy_convergence(toy_training):
    samples, cfg, (a, b) = toy_training
    widths = cfg.arch().widths()
    reduction = 1 - a["last"] / a["first"]
    identical = same_params(a["trainer"].generator.params, b["trainer"].generator.params) and \
        same_params(a["trainer"].discriminator.params, b["trainer"].discriminator.params)
    ok = (max(widths) <= 16 and len(samples) == 16 and cfg.n_iterations(16) == 200
          and reduction >= 0.5 and max(a["seconds"], b["seconds"]) < 600 and identical)
    verdict(3, ok, f"widths {widths}, masked L1 {a['first']:.4f} -> {a['last']:.4f} "
                   f"({100 * reduction:.1f}% reduction), {a['seconds']:.0f}s/{b['seconds']:.0f}s, "
                   f"bit-identical rerun: {identical}")


# -- 4. parameter counts ----------------------------------------------------------------------

def test_c04_parameter_counts():
    counts = paper_scale_counts()
    eg = abs(counts["generator"] - 162.6e6) / 162.6e6
    ed = abs(counts["discriminator"] - 26.9e6) / 26.9e6
    verdict(4, eg < 0.05 and ed < 0.05,
            f"theta_g {counts['generator']:,} ({100 * eg:.2f}% off), "
            f"theta_d {counts['discriminator']:,} ({100 * ed:.2f}% off)")


# -- 5. augmentation count --------------------------------------------------------------------

def test_c05_augmentation_count():
    rng = np.random.default_rng(0)
    sources = (rng.normal(size=(40, 40, 32)) for _ in range(169))
    n = sum(1 for v in iter_augmented(sources, order=1) if v.shape == (32, 32, 32))
    verdict(5, n == 11323, f"169 sources x {N_VARIANTS} variants -> {n} samples")


# -- 6. preprocessing round trip -------------------------------------------------------------

def smooth_cuboid(seed, spacing=(0.7, 0.7, 1.25)):
    vol, nod = random_phantom(seed, 1, spacing=spacing, lung_sigma=0.0)
    sm = ndimage.gaussian_filter(vol.voxels.astype(float), [1.0 / s for s in spacing])
    return cut_cuboid(vol.with_voxels(np.rint(sm)), nod[0].center, 32)


def test_c06_preprocessing_round_trip():
    smooth = []
    for seed in range(3):
        c = smooth_cuboid(seed)
        cube, ctx = preprocess(c)
        smooth.append(psnr(c.voxels, inverse_preprocess(cube, ctx)))
    noisy = []
    for seed in range(3):
        vol, nod = random_phantom(10 + seed, 1)
        c = cut_cuboid(vol, nod[0].center, 32)
        cube, ctx = preprocess(c)
        noisy.append(psnr(c.voxels, inverse_preprocess(cube, ctx)))
    rng = np.random.default_rng(1)
    worst_norm = 0.0
    for _ in range(20):
        v = rng.uniform(-5, 5) + rng.uniform(0.01, 10) * rng.random((32, 32, 32))
        ctx = PreprocessContext()
        back = denormalize(normalize(Cube(v, EQUALIZED), ctx).values, ctx)
        worst_norm = max(worst_norm, float(np.max(np.abs(back - v) / np.maximum(np.abs(v), 1e-300))))
    ok = min(smooth) >= 40 and min(noisy) >= 25 and worst_norm <= 1e-9
    verdict(6, ok, f"smooth PSNR min {min(smooth):.1f} dB, noisy PSNR min {min(noisy):.1f} dB, "
                   f"normalization inverse rel err {worst_norm:.1e}")


# -- 7. merge weight units --------------------------------------------------------------------

def test_c07_merge_weight():
    cfg = TamperConfig.from_dict({})
    mid = float(compute_weight(np.array([[[-cfg.alpha]]]), cfg.alpha, cfg.beta, kernel=np.ones((1, 1, 1)))[0, 0, 0])
    rng = np.random.default_rng(3)
    convex = True
    for _ in range(20):
        src = rng.uniform(-1100, 400, (9, 11, 7))
        dst = rng.uniform(-1100, 400, (9, 11, 7))
        out = merge(src, dst, cfg.alpha, cfg.beta)
        w = compute_weight(src, cfg.alpha, cfg.beta)
        convex &= bool(np.allclose(out, w * src + (1 - w) * dst) and ((w >= 0) & (w <= 1)).all()
                       and (out >= np.minimum(src, dst) - 1e-9).all() and (out <= np.maximum(src, dst) + 1e-9).all())
    ok = mid == 0.5 and convex and (cfg.alpha, cfg.beta) == (500.0, 70.0)
    verdict(7, ok, f"weight at x=-alpha with G=1: {mid}, convex blends: {convex}, "
                   f"defaults alpha={cfg.alpha:g} beta={cfg.beta:g}")


# -- 8. localization hit rate -----------------------------------------------------------------

def test_c08_localization_hit_rate():
    hits = total = 0
    for seed in range(10):
        vol, _ = random_phantom(200 + seed)
        rng = np.random.default_rng([seed, 8])
        for c in locate_candidates(vol, "random-middle", 100, validate=False, rng=rng):
            hits += neighborhood_mean(vol, c) < -500
            total += 1
    rate = hits / total
    verdict(8, total == 1000 and rate >= 0.99, f"{hits}/{total} candidates in lung-density tissue ({rate:.3f})")


# -- 9. end to end with the oracle ------------------------------------------------------------

def test_c09_oracle_end_to_end():
    oracle = OracleInpainter()
    matched_counts, outside = [], 0
    for seed in range(3):
        vol, _ = random_phantom(300 + seed)
        out, rec = inject(vol, oracle, TamperConfig(seed=seed))
        dets = detect_nodules(out, min_diameter_mm=8.0)
        sp = np.asarray(out.spacing)
        matched = sum(any(np.linalg.norm((np.asarray(d.center) - a.center) * sp) <= a.diameter_mm / 2 for d in dets)
                      for a in rec)
        matched_counts.append(matched)
        outside += changed_outside(vol, out, rec)
    leftovers = []
    for seed in range(3):
        vol, _ = random_phantom(310 + seed, 2)
        out, rec = remove(vol, oracle, config=TamperConfig(mode="remove", seed=seed))
        leftovers.append(len(detect_nodules(out, min_diameter_mm=3.0)))
        outside += changed_outside(vol, out, rec)
    ok = min(matched_counts) >= 4 and max(leftovers) == 0 and outside == 0
    verdict(9, ok, f"matched >8mm detections per injected scan {matched_counts}, "
                   f"detections >3mm after removal {leftovers}, voxels changed outside footprints {outside}")


# -- 10. pipeline after toy training ----------------------------------------------------------

@pytest.mark.slow
def test_c10_gan_injection_raises_density(toy_training):
    _, _, runs = toy_training
    gan = GanInpainter(runs[0]["trainer"].generator)
    rises = []
    for seed in range(3):
        vol, _ = random_phantom(400 + seed)
        out, rec = inject(vol, gan, TamperConfig(success_diameter_mm=0, seed=seed))
        for a in rec:
            # the in-painted 16^3 core of the 32^3 cube is the middle half of the cuboid
            sl = tuple(slice(o + e * MASK_LO // 32, o + e * MASK_HI // 32) for o, e in zip(a.origin, a.extents))
            rises.append(float(out.voxels[sl].mean() - vol.voxels[sl].mean()))
    ok = min(rises) >= 200
    verdict(10, ok, f"{len(rises)} sites, mean-HU rise in the masked core: min {min(rises):.0f}, "
                    f"median {np.median(rises):.0f}, max {max(rises):.0f}")


# -- 11. PACS simulation ----------------------------------------------------------------------

def malformed_frames(n, seed=0):
    rng = np.random.default_rng(seed)
    payload = b"payload-bytes"
    good = b"CTPS\x01\x01" + struct.pack("<H", 4) + b"fuzz" + struct.pack("<Q", len(payload)) + payload \
        + bytes(32)
    for i in range(n):
        buf = bytearray(good)
        kind = i % 5
        if kind == 0:
            buf = bytearray(rng.integers(0, 256, int(rng.integers(1, 80)), dtype=np.uint8).tobytes())
        elif kind == 1:
            buf = buf[:int(rng.integers(1, len(buf)))]
        elif kind == 2:
            for _ in range(int(rng.integers(1, 4))):
                buf[int(rng.integers(0, 18))] = int(rng.integers(0, 256))
        elif kind == 3:
            buf[18:26] = struct.pack("<Q", int(rng.integers(2 ** 32, 2 ** 63)))
        # kind 4: all-zero digest never matches
        yield bytes(buf)


def test_c11_pacs(caplog):
    local = ("127.0.0.1", 0)
    rng = np.random.default_rng(11)
    transparent = 0
    with PacsServer(local, idle_timeout=2) as srv:
        with Bridge(local, srv.address) as br:
            for i in range(100):
                payload = rng.integers(0, 256, int(rng.integers(0, 2 ** 20 + 1)), dtype=np.uint8).tobytes()
                send(payload, br.address, f"t{i}")
                transparent += srv.state.get(f"t{i}").payload == payload and retrieve(br.address, f"t{i}") == payload

        records = []
        vol, _ = random_phantom(500)
        hook = tamper_hook(lambda v: inject(v, OracleInpainter(), TamperConfig(max_injections=2, seed=1)), records)
        with Bridge(local, srv.address, hook=hook) as br:
            send(vol, br.address, "victim")
        stored = decode_raw(srv.state.get("victim").payload)
        (_, rec), = records
        confined = changed_outside(vol, stored, rec) == 0 and (stored.voxels != vol.voxels).any()

        with caplog.at_level(logging.ERROR):
            for data in malformed_frames(1000):
                with socket.create_connection(srv.address, timeout=5) as s:
                    s.sendall(data)
                    s.shutdown(socket.SHUT_WR)
                    s.makefile("rb").read()
        crashes = len([r for r in caplog.records if r.levelno >= logging.ERROR])
        send(b"alive", srv.address, "after-fuzz")
        alive = retrieve(srv.address, "after-fuzz") == b"alive"
    ok = transparent == 100 and confined and crashes == 0 and alive
    verdict(11, ok, f"byte-transparent {transparent}/100, hook changes confined to footprints: {confined}, "
                    f"server errors after 1000 malformed frames: {crashes}, still serving: {alive}")


# -- 12. integrity ----------------------------------------------------------------------------

@pytest.mark.slow
def test_c12_integrity():
    key = ig.generate_key(b"acceptance")
    pub = key.public_key()
    vol, _ = random_phantom(600, dims=(64, 64, 40))
    sig = ig.sign_scan(vol, key)
    rng = np.random.default_rng(12)
    caught = 0
    for _ in range(100):
        v = np.array(vol.voxels)
        idx = tuple(int(rng.integers(n)) for n in vol.dims)
        v[idx] = v[idx] + 1 if v[idx] < 3071 else v[idx] - 1
        caught += not ig.verify_scan(vol.with_voxels(v), sig, pub)
    clean_valid = all(ig.verify_scan(random_phantom(610 + s, dims=(64, 64, 40))[0],
                                     ig.sign_scan(random_phantom(610 + s, dims=(64, 64, 40))[0], key), pub)
                      for s in range(5))

    library = build_template_library(10, seed=7)
    flagged = false_pos = 0
    n = 50
    for i in range(n):
        clean, _ = random_phantom(10_000 + i)
        spliced, _ = splice_attack(clean, library, seed=i)
        flagged += ig.detect_noise_anomaly(spliced).suspicious()
        false_pos += ig.detect_noise_anomaly(clean).suspicious()
    tpr, fpr = flagged / n, false_pos / n
    ok = caught == 100 and clean_valid and tpr >= 0.8 and fpr < 0.05
    verdict(12, ok, f"single-voxel flips caught {caught}/100, untampered valid: {clean_valid}, "
                    f"splice flagged {tpr:.2f}, clean false positives {fpr:.2f} (n={n} each)")


# -- 13. splice vs in-paint boundary score ----------------------------------------------------

@pytest.mark.slow
def test_c13_boundary_gap():
    library = build_template_library(10, seed=7)
    oracle = OracleInpainter()
    cfg = TamperConfig()
    wins = trials = 0
    seed = 0
    while trials < 50:
        vol, _ = random_phantom(700 + seed)
        seed += 1
        try:
            spliced, rec = splice_attack(vol, library, seed=seed)
            site = rec.actions[0].center
            painted, _, _ = tamper_site(vol, site, oracle, cfg, "inject", np.random.default_rng(seed))
        except CTGanSimError:
            continue  # both cuboids must fit at the site
        sl = rec.actions[0].slices
        wins += ig.boundary_discontinuity_score(spliced, sl) > ig.boundary_discontinuity_score(painted, sl)
        trials += 1
    verdict(13, wins / trials >= 0.9, f"splice score above in-paint score in {wins}/{trials} trials")


# -- 14. DICOM round trip ---------------------------------------------------------------------

def test_c14_dicom():
    import glob
    files = sorted(f for f in glob.glob(os.path.join(FIXTURES, "dicom", "*.dcm")) if "missing" not in f)
    identical = 0
    for f in files:
        raw = open(f, "rb").read()
        identical += dicom.write_dicom(dicom.parse_dicom(raw)) == raw
    rng = np.random.default_rng(14)
    crashes = 0
    runs = 0
    for f in files:
        base = open(f, "rb").read()
        for _ in range(200):
            buf = bytearray(base)
            for _ in range(int(rng.integers(1, 8))):
                op = rng.integers(3)
                if op == 0 and buf:
                    buf[int(rng.integers(len(buf)))] = int(rng.integers(256))
                elif op == 1:
                    buf = buf[:int(rng.integers(len(buf) + 1))]
                else:
                    i = int(rng.integers(len(buf) + 1))
                    buf[i:i] = rng.integers(0, 256, int(rng.integers(1, 16)), dtype=np.uint8).tobytes()
            runs += 1
            try:
                dicom.parse_dicom(bytes(buf))
            except CTGanSimError:
                pass
            except Exception:
                crashes += 1
    ok = identical == len(files) and len(files) > 0 and crashes == 0
    verdict(14, ok, f"byte-identical round trips {identical}/{len(files)}, "
                    f"unexpected exceptions in {runs} fuzzed parses: {crashes}")
