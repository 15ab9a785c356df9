"""``ctgan-sim`` command line: phantoms, training, tampering, PACS traffic, integrity, evaluation.

Exit status is 0 on success, 1 on an operational error and 2 on a usage error.
Volumes are read from ``.raw`` files or from directories of ``.dcm`` slices.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys
import time
from typing import List, Optional

import numpy as np

from . import dicom, integrity
from .errors import CTGanSimError
from .phantom import format_nodules, random_phantom, read_truth, write_truth
from .rawio import read_raw, write_raw
from .volume import Volume

log = logging.getLogger("ctgan_sim")


class UsageError(Exception):
    pass


# -- volume I/O -----------------------------------------------------------------

def load_volume(path) -> Volume:
    if os.path.isdir(path):
        return dicom.assemble_volume(load_slices(path))
    return read_raw(path)


def dicom_files(path) -> List[str]:
    files = sorted(glob.glob(os.path.join(path, "*.dcm")))
    if not files:
        raise CTGanSimError(f"no .dcm files in {path}")
    return files


def load_slices(path) -> List[dicom.DicomSlice]:
    return [dicom.parse_dicom(open(f, "rb").read()) for f in dicom_files(path)]


def write_slices(slices, out_dir, names=None):
    """Write one file per slice; ``names`` (basenames) let a directory be rewritten in place."""
    os.makedirs(out_dir, exist_ok=True)
    for i, s in enumerate(slices):
        name = names[i] if names is not None else f"slice{i:04d}.dcm"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(dicom.write_dicom(s))


def save_volume(volume: Volume, path, like: Optional[str] = None):
    """Write ``.raw``, or DICOM slices when ``path`` has no extension; DICOM output keeps
    the headers of ``like`` when that is a DICOM directory."""
    if path.endswith(".raw"):
        write_raw(volume, path)
    elif like is not None and os.path.isdir(like):
        write_slices(dicom.replace_pixels(load_slices(like), volume), path)
    else:
        write_slices(dicom.split_volume(volume), path)


def sidecar(path, ext):
    base = path[:-4] if path.endswith(".raw") else path.rstrip("/")
    return base + ext


def address(text: str):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise UsageError(f"expected host:port, got {text!r}")
    return host, int(port)


# -- config -----------------------------------------------------------------------

def section(args, name) -> dict:
    return dict(args.config_data.get(name, {}))


def tamper_config(args, mode):
    from .pipeline.tamper import TamperConfig

    data = section(args, "tamper")
    data["mode"] = mode
    data["seed"] = args.seed
    if getattr(args, "count", None) is not None:
        data["max_injections"] = args.count
    return TamperConfig.from_dict(data)


def make_inpainter(args):
    from .pipeline.oracle import GanInpainter, OracleInpainter

    if args.model in (None, "oracle"):
        return OracleInpainter(**section(args, "oracle"))
    from .gan.checkpoint import load_checkpoint

    gen, _, _ = load_checkpoint(args.model)
    return GanInpainter(gen)


def make_detector(spec: str, args=None):
    from .pipeline.detector import ThresholdDetector

    if spec == "threshold":
        return ThresholdDetector(**(section(args, "detector") if args is not None else {}))
    if spec.startswith("external:"):
        from .evaluation import ExternalDetector

        return ExternalDetector(spec[len("external:"):].split())
    raise UsageError(f"unknown detector {spec!r}; use 'threshold' or 'external:<command>'")


# -- subcommands -------------------------------------------------------------------

def cmd_phantom(args):
    overrides = section(args, "phantom")
    if args.dims:
        overrides["dims"] = tuple(args.dims)
    if args.noise_correlation is not None:
        overrides["noise_correlation"] = args.noise_correlation
    vol, nodules = random_phantom(args.seed, args.nodules, tuple(args.diameter_range), **overrides)
    write_raw(vol, args.out)
    write_truth(nodules, sidecar(args.out, ".truth"))
    sys.stdout.write(format_nodules(nodules))


def cmd_dataset(args):
    from .phantom import generate_dataset

    samples = generate_dataset(args.n, tuple(args.diameter_range), seed=args.seed, mode=args.mode,
                               **section(args, "phantom"))
    np.savez_compressed(
        args.out,
        cubes=np.stack([s.cube for s in samples]).astype(np.float32),
        centers=np.array([s.center for s in samples], dtype=np.int64),
        diameters=np.array([s.nodule.diameter_mm if s.nodule else 0.0 for s in samples]),
    )
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    from .gan.checkpoint import save_checkpoint
    from .gan.training import TrainConfig, Trainer, reconstruction_error

    with np.load(args.data) as data:
        cubes = data["cubes"]
    opts = section(args, "train")
    opts["seed"] = args.seed
    if args.iterations is not None:
        opts["iterations"] = args.iterations
    cfg = TrainConfig(**opts) if args.paper_scale else TrainConfig.toy(**opts)
    trainer = Trainer(cubes, cfg)
    every = max(1, args.log_every)

    def progress(i, tr):
        if (i + 1) % every == 0:
            h = tr.history
            print(f"iter {i + 1} d_real {h.d_real[-1]:.4f} d_fake {h.d_fake[-1]:.4f} "
                  f"g_adv {h.g_adv[-1]:.4f} g_l1 {h.g_l1[-1]:.4f}", flush=True)

    gen, disc, _ = trainer.run(callback=progress)
    save_checkpoint(gen, disc, args.out, extra={"train": cfg.to_dict()})
    print(f"masked L1 {reconstruction_error(gen, cubes):.4f}; wrote {args.out}")


def _write_tampered(args, volume, record, truth_in):
    from .evaluation import truth_after

    save_volume(volume, args.out, like=args.input)
    record.save(args.record or sidecar(args.out, ".record"))
    if truth_in is not None:
        write_truth(truth_after(truth_in, record, volume.spacing), sidecar(args.out, ".truth"))
    for a in record:
        print(f"{a.mode} {a.center[0]},{a.center[1]},{a.center[2]} {a.diameter_mm:.2f}mm")


def _input_truth(path):
    p = sidecar(path, ".truth")
    return read_truth(p) if os.path.exists(p) else None


def cmd_inject(args):
    from .pipeline.tamper import inject

    vol = load_volume(args.input)
    out, record = inject(vol, make_inpainter(args), tamper_config(args, "inject"),
                         detector=make_detector(args.detector, args))
    _write_tampered(args, out, record, _input_truth(args.input) or [])


def cmd_remove(args):
    from .pipeline.tamper import remove

    vol = load_volume(args.input)
    out, record = remove(vol, make_inpainter(args), make_detector(args.detector, args),
                         tamper_config(args, "remove"))
    _write_tampered(args, out, record, _input_truth(args.input))


def cmd_splice(args):
    from .pipeline.splice import build_template_library, splice_attack
    from .pipeline.tamper import TamperRecord

    vol = load_volume(args.input)
    library = build_template_library(args.library_size, seed=args.library_seed)
    record = TamperRecord()
    for i in range(args.count):
        vol, rec = splice_attack(vol, library, seed=args.seed + i)
        record.actions.extend(rec.actions)
    _write_tampered(args, vol, record, _input_truth(args.input) or [])


def _tls(args, server: bool):
    if not args.tls_dir:
        return None
    from .pacs import tls

    if server:
        cert, key = tls.make_self_signed(args.tls_dir)
        return tls.server_context(cert, key)
    return tls.client_context(os.path.join(args.tls_dir, "cert.pem"))


def _run_until(duration):
    try:
        if duration > 0:
            time.sleep(duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass


def cmd_serve(args):
    from .pacs.server import PacsServer

    with PacsServer((args.host, args.port), tls=_tls(args, True)) as srv:
        host, port = srv.address
        print(f"listening {host}:{port}", flush=True)
        _run_until(args.duration)


def cmd_send(args):
    from .pacs.client import retrieve, send

    addr = address(args.to)
    vol = load_volume(args.input)
    series = args.series or vol.series_id
    tls = _tls(args, False)
    send(vol, addr, series_id=series, tls=tls)
    print(f"stored {series}")
    if args.retrieve:
        payload = retrieve(addr, series, tls=tls)
        with open(args.retrieve, "wb") as fh:
            fh.write(payload)
        print(f"retrieved {len(payload)} bytes to {args.retrieve}")


def cmd_bridge(args):
    from .pacs.bridge import Bridge, CaptureLog, tamper_hook

    hook = None
    if args.attack != "none":
        from .pipeline.tamper import inject, remove

        inpainter = make_inpainter(args)
        detector = make_detector("threshold", args)
        if args.attack == "inject":
            cfg = tamper_config(args, "inject")
            hook = tamper_hook(lambda v: inject(v, inpainter, cfg, detector=detector))
        elif args.attack == "remove":
            cfg = tamper_config(args, "remove")
            hook = tamper_hook(lambda v: remove(v, inpainter, detector, cfg))
        else:
            from .pipeline.splice import build_template_library, splice_attack

            lib = build_template_library(seed=args.seed)
            hook = tamper_hook(lambda v: splice_attack(v, lib, seed=args.seed))
    capture = CaptureLog(args.capture)
    with Bridge(address(args.listen), address(args.upstream), hook=hook, capture=capture) as br:
        host, port = br.address
        print(f"bridging {host}:{port} -> {args.upstream}", flush=True)
        _run_until(args.duration)


def cmd_sign(args):
    if args.new_key:
        key = integrity.generate_key(args.seed if args.deterministic_key else None)
        integrity.save_private_key(key, args.new_key)
        integrity.save_public_key(key.public_key(), args.new_key + ".pub")
        print(f"wrote {args.new_key} and {args.new_key}.pub")
    elif args.key:
        key = integrity.load_private_key(args.key)
    else:
        raise UsageError("sign needs --key or --new-key")
    if args.input is None:
        return
    if os.path.isdir(args.input):
        names = [os.path.basename(f) for f in dicom_files(args.input)]
        slices = load_slices(args.input)
        sig = integrity.sign_scan(dicom.assemble_volume(slices), key)
        write_slices(integrity.embed_signature(slices, sig), args.out or args.input, names)
        print(f"embedded signature {sig.key_id}")
    else:
        sig = integrity.sign_scan(read_raw(args.input), key)
        out = args.out or sidecar(args.input, ".sig")
        with open(out, "w") as fh:
            fh.write(sig.dumps())
        print(f"wrote {out}")


def cmd_verify(args):
    pub = integrity.load_public_key(args.pub)
    if os.path.isdir(args.input):
        slices = load_slices(args.input)
        sig = integrity.extract_signature(slices)
        vol = dicom.assemble_volume(slices)
        if sig is None:
            print("invalid: no embedded signature")
            return 1
    else:
        vol = read_raw(args.input)
        with open(args.sig or sidecar(args.input, ".sig")) as fh:
            sig = integrity.ScanSignature.loads(fh.read())
    verdict = integrity.verify_scan(vol, sig, pub)
    print(verdict)
    return 0 if verdict else 1


def cmd_detect(args):
    vol = load_volume(args.input)
    if args.method == "noise":
        amap = integrity.detect_noise_anomaly(vol, k=args.k)
        for cluster in amap.clusters():
            if len(cluster) >= integrity.MIN_CLUSTER:
                sl = [amap.block_slices(b) for b in cluster]
                lo = [min(s[a].start for s in sl) for a in range(3)]
                hi = [max(s[a].stop for s in sl) for a in range(3)]
                print(f"anomaly blocks={len(cluster)} box={lo}-{hi}")
        print("suspicious" if amap.suspicious() else "clean")
        return 0
    from .evaluation import format_detections

    dets = make_detector(args.method, args)(vol)
    sys.stdout.write(format_detections(d for d in dets if d.diameter_mm > args.min_diameter))


def cmd_eval(args):
    from .evaluation import load_scan_set, report_emit, run_eval

    scans = load_scan_set(args.scans)
    detectors = {}
    for spec in args.detector:
        det = make_detector(spec, args)
        detectors[getattr(det, "name", spec)] = det
    report = run_eval(scans, detectors)
    for path in report_emit(report, args.out, ("csv", "svg") if args.svg else ("csv",)):
        print(f"wrote {path}")
    for r in report.results:
        p = r.patient
        print(f"{r.detector}: patient TP={p.tp} FP={p.fp} FN={p.fn} TN={p.tn} "
              f"injection={r.injection.rate:.3f} removal={r.removal.rate:.3f}")


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctgan-sim", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (default 0)")
    p.add_argument("--config", help="JSON config with optional tamper/train/phantom/oracle/detector sections")
    p.add_argument("-v", "--verbose", action="store_true")
    # the global options are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, parents=[common])
        sp.set_defaults(func=func)
        return sp

    def tamper_args(sp, count=False):
        sp.add_argument("--in", dest="input", required=True)
        sp.add_argument("--out", required=True, help=".raw file or DICOM output directory")
        sp.add_argument("--model", help="generator checkpoint, or 'oracle' (default)")
        sp.add_argument("--record", help="tamper record path (default: beside --out)")
        sp.add_argument("--detector", default="threshold")
        if count:
            sp.add_argument("--count", type=int)

    sp = add("phantom", cmd_phantom, "generate a synthetic chest phantom")
    sp.add_argument("--out", required=True)
    sp.add_argument("--nodules", type=int, default=0)
    sp.add_argument("--diameter-range", type=float, nargs=2, default=(10.0, 16.0))
    sp.add_argument("--dims", type=int, nargs=3)
    sp.add_argument("--noise-correlation", type=float)

    sp = add("dataset", cmd_dataset, "cut preprocessed training cubes from phantoms")
    sp.add_argument("--out", required=True, help=".npz output")
    sp.add_argument("--n", type=int, default=16)
    sp.add_argument("--mode", choices=("inject", "remove"), default="inject")
    sp.add_argument("--diameter-range", type=float, nargs=2, default=(10.0, 16.0))

    sp = add("train", cmd_train, "train an in-painting GAN (toy scale unless --paper-scale)")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--paper-scale", action="store_true")
    sp.add_argument("--log-every", type=int, default=50)

    tamper_args(add("inject", cmd_inject, "inject nodules"), count=True)
    tamper_args(add("remove", cmd_remove, "remove detected nodules"))
    sp = add("splice", cmd_splice, "paste pre-cut nodules (baseline attack)")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--record")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--library-size", type=int, default=10)
    sp.add_argument("--library-seed", type=int, default=0)

    sp = add("serve", cmd_serve, "run a PACS storage server")
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=11112)
    sp.add_argument("--tls-dir", help="create a self-signed certificate here and require TLS")
    sp.add_argument("--duration", type=float, default=0, help="seconds to run (0 = until interrupted)")

    sp = add("send", cmd_send, "store a scan on a PACS server")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--to", required=True, help="host:port")
    sp.add_argument("--series")
    sp.add_argument("--retrieve", help="fetch the series back into this file")
    sp.add_argument("--tls-dir", help="directory holding the server's cert.pem")

    sp = add("bridge", cmd_bridge, "man-in-the-middle relay with optional tampering")
    sp.add_argument("--listen", required=True, help="host:port")
    sp.add_argument("--upstream", required=True, help="host:port")
    sp.add_argument("--attack", choices=("none", "inject", "remove", "splice"), default="none")
    sp.add_argument("--model")
    sp.add_argument("--count", type=int)
    sp.add_argument("--capture", help="JSON-lines capture log")
    sp.add_argument("--duration", type=float, default=0)

    sp = add("sign", cmd_sign, "sign a scan (raw sidecar or embedded DICOM tag)")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--out")
    sp.add_argument("--key", help="PEM private key")
    sp.add_argument("--new-key", help="generate a key pair at this path (+ .pub)")
    sp.add_argument("--deterministic-key", action="store_true", help="derive the new key from --seed")

    sp = add("verify", cmd_verify, "verify a scan signature")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--sig")
    sp.add_argument("--pub", required=True)

    sp = add("detect", cmd_detect, "run a nodule detector or the noise-anomaly detector")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--method", default="threshold", help="threshold, noise, or external:<command>")
    sp.add_argument("--min-diameter", type=float, default=3.0)
    sp.add_argument("-k", type=float, default=4.0, help="noise-anomaly threshold in robust sigmas")

    sp = add("eval", cmd_eval, "score detectors on a labeled scan directory")
    sp.add_argument("--scans", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--detector", action="append", default=None,
                    help="threshold or external:<command>; repeatable")
    sp.add_argument("--svg", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "detector", None) is None and args.command == "eval":
        args.detector = ["threshold"]
    try:
        args.config_data = {}
        if args.config:
            with open(args.config) as fh:
                args.config_data = json.load(fh)
            if not isinstance(args.config_data, dict):
                raise CTGanSimError("config must be a JSON object")
        rc = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 2
    except (CTGanSimError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
