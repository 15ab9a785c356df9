"""Inject a nodule into a phantom, watch the detector fall for it, then catch it.

Run: python3 demos/01_tamper_and_defend.py
"""
from ctgan_sim import integrity as ig
from ctgan_sim.phantom import random_phantom
from ctgan_sim.pipeline.detector import detect_nodules
from ctgan_sim.pipeline.oracle import OracleInpainter
from ctgan_sim.pipeline.splice import build_template_library, splice_attack
from ctgan_sim.pipeline.tamper import TamperConfig, changed_outside, inject


def show(title, vol):
    dets = detect_nodules(vol, min_diameter_mm=3.0)
    print(f"{title}: {len(dets)} detections")
    for d in dets:
        print(f"    at {tuple(int(c) for c in d.center)}  {d.diameter_mm:.1f} mm")


scan, truth = random_phantom(42, n_nodules=0)
print(f"healthy phantom {scan.dims} at {scan.spacing} mm")
show("before", scan)

# the hospital signs the scan at the modality
key = ig.generate_key(b"demo-modality")
sig = ig.sign_scan(scan, key)

# the attacker in-paints two nodules; the oracle stands in for a trained generator
tampered, record = inject(scan, OracleInpainter(), TamperConfig(max_injections=2, seed=3))
show("after injection", tampered)
print("voxels touched outside the recorded footprints:", changed_outside(scan, tampered, record))

print("signature valid on original:", ig.verify_scan(scan, sig, key.public_key()))
print("signature valid on tampered:", ig.verify_scan(tampered, sig, key.public_key()))

# a crude copy-paste attacker leaves a noise fingerprint from another scanner
spliced, _ = splice_attack(scan, build_template_library(10, seed=7), seed=1)
print("noise detector on clean scan:  ", ig.detect_noise_anomaly(scan).suspicious())
print("noise detector on spliced scan:", ig.detect_noise_anomaly(spliced).suspicious())
