"""A modality uploads a scan to the PACS through a compromised relay.

Run: python3 demos/02_pacs_man_in_the_middle.py
"""
from ctgan_sim.pacs.bridge import Bridge, tamper_hook
from ctgan_sim.pacs.client import retrieve, send
from ctgan_sim.pacs.server import PacsServer
from ctgan_sim.phantom import random_phantom
from ctgan_sim.pipeline.detector import detect_nodules
from ctgan_sim.pipeline.oracle import OracleInpainter
from ctgan_sim.pipeline.tamper import TamperConfig, inject
from ctgan_sim.rawio import decode_raw

local = ("127.0.0.1", 0)
scan, _ = random_phantom(7, n_nodules=0)
records = []
attack = tamper_hook(lambda v: inject(v, OracleInpainter(), TamperConfig(max_injections=1, seed=0)), records)

with PacsServer(local) as pacs, Bridge(local, pacs.address, hook=attack) as relay:
    print("PACS at", pacs.address, "relay at", relay.address)
    send(scan, relay.address, "patient-007")
    stored = decode_raw(retrieve(pacs.address, "patient-007"))
    for entry in relay.capture.entries:
        print(f"  {entry.direction} {entry.type:8s} {entry.payload_bytes:>9d} bytes  hook={entry.hook_applied}")

print("nodules the radiologist's detector sees:", len(detect_nodules(stored, min_diameter_mm=3.0)))
print("sites the attacker recorded:", [tuple(a.center) for a in records[0][1]])
