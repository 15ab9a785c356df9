"""Detector evaluation over labeled scan sets, attack success rates, and report files.

Truth is the nodule content of each scan (phantom sidecar plus any tamper record).
A detection matches a truth nodule when its center lies within the nodule's radius;
a scan is a positive patient when any nodule is larger than 8 mm.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
import glob
import io
import math
import os
import subprocess
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .errors import CTGanSimError, MissingGroundTruth
from .phantom import Nodule, read_truth
from .pipeline.detector import Detection
from .pipeline.tamper import TamperRecord
from .rawio import encode_raw, read_raw
from .volume import Volume

MALIGNANT_MM = 8.0
REPORT_FLOOR_MM = 3.0
TAMPER_KINDS = ("none", "inject", "remove")


@dataclass
class EvalScan:
    scan_id: str
    volume: Volume
    truth: Optional[List[Nodule]]
    tamper: str = "none"


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @staticmethod
    def _rate(num, den):
        return num / den if den else float("nan")

    @property
    def tpr(self):
        return self._rate(self.tp, self.tp + self.fn)

    @property
    def fpr(self):
        return self._rate(self.fp, self.fp + self.tn)

    @property
    def tnr(self):
        return self._rate(self.tn, self.fp + self.tn)

    @property
    def fnr(self):
        return self._rate(self.fn, self.tp + self.fn)


@dataclass
class AttackRate:
    attack: str
    n: int = 0
    successes: int = 0

    @property
    def rate(self):
        return self.successes / self.n if self.n else float("nan")


@dataclass
class DetectorResult:
    detector: str
    instance: Counts = field(default_factory=Counts)
    patient: Counts = field(default_factory=Counts)
    injection: AttackRate = field(default_factory=lambda: AttackRate("injection"))
    removal: AttackRate = field(default_factory=lambda: AttackRate("removal"))


@dataclass
class EvalReport:
    results: List[DetectorResult]

    def result(self, detector: str) -> DetectorResult:
        for r in self.results:
            if r.detector == detector:
                return r
        raise KeyError(detector)


def match(detections: Sequence[Detection], truth: Sequence[Nodule], spacing) -> Tuple[int, int, int]:
    """Greedy center-within-radius matching; returns (tp, fp, fn)."""
    spacing = np.asarray(spacing, dtype=np.float64)
    free = list(range(len(detections)))
    tp = 0
    for nod in sorted(truth, key=lambda n: -n.diameter_mm):
        best, best_d = None, None
        for j in free:
            d = float(np.linalg.norm((np.asarray(detections[j].center) - nod.center) * spacing))
            if d <= nod.diameter_mm / 2 and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            free.remove(best)
            tp += 1
    return tp, len(free), len(truth) - tp


def evaluate_scan(result: DetectorResult, scan: EvalScan, detections: Sequence[Detection],
                  floor_mm: float = REPORT_FLOOR_MM, malignant_mm: float = MALIGNANT_MM):
    dets = [d for d in detections if d.diameter_mm > floor_mm]
    tp, fp, fn = match(dets, scan.truth, scan.volume.spacing)
    inst = result.instance
    inst.tp += tp
    inst.fp += fp
    inst.fn += fn
    if not scan.truth and not dets:
        inst.tn += 1
    truth_pos = any(n.diameter_mm > malignant_mm for n in scan.truth)
    pred_pos = any(d.diameter_mm > malignant_mm for d in dets)
    pat = result.patient
    if truth_pos and pred_pos:
        pat.tp += 1
    elif truth_pos:
        pat.fn += 1
    elif pred_pos:
        pat.fp += 1
    else:
        pat.tn += 1
    if scan.tamper == "inject":
        result.injection.n += 1
        result.injection.successes += int(pred_pos)
    elif scan.tamper == "remove":
        result.removal.n += 1
        result.removal.successes += int(not pred_pos)


def run_eval(scans: Sequence[EvalScan], detectors: Dict[str, Callable], **kw) -> EvalReport:
    """Evaluate each detector on every scan. Raises MissingGroundTruth on an empty set or
    a scan without truth."""
    if not scans:
        raise MissingGroundTruth("empty scan set")
    for s in scans:
        if s.truth is None:
            raise MissingGroundTruth(f"scan {s.scan_id} has no ground truth")
        if s.tamper not in TAMPER_KINDS:
            raise ValueError(f"unknown tamper kind {s.tamper!r}")
    results = []
    for name, det in detectors.items():
        res = DetectorResult(name)
        for s in scans:
            evaluate_scan(res, s, det(s.volume), **kw)
        results.append(res)
    return EvalReport(results)


# -- scan sets on disk --------------------------------------------------------

def truth_after(base: Sequence[Nodule], record: Optional[TamperRecord], spacing) -> List[Nodule]:
    """Nodule content after applying a tamper record to a scan with ``base`` truth."""
    truth = list(base)
    if record is None:
        return truth
    sp = np.asarray(spacing, dtype=np.float64)
    for a in record:
        if a.mode in ("inject", "splice"):
            truth.append(Nodule(tuple(a.center), a.diameter_mm))
        elif a.mode == "remove":
            truth = [n for n in truth
                     if np.linalg.norm((np.asarray(n.center) - a.center) * sp) > max(n.diameter_mm / 2, 1e-9)]
    return truth


def tamper_kind(record: Optional[TamperRecord]) -> str:
    if record is None or not len(record):
        return "none"
    modes = {a.mode for a in record}
    return "remove" if modes == {"remove"} else "inject"


def load_scan_set(directory) -> List[EvalScan]:
    """Load ``*.raw`` scans with ``.truth`` sidecars and optional ``.record`` tamper logs.

    A scan needs at least one of the two; a remove record without base truth is an error.
    """
    scans = []
    for path in sorted(glob.glob(os.path.join(directory, "*.raw"))):
        stem = path[:-4]
        vol = read_raw(path)
        record = TamperRecord.load(stem + ".record") if os.path.exists(stem + ".record") else None
        has_truth = os.path.exists(stem + ".truth")
        if not has_truth and (record is None or any(a.mode == "remove" for a in record)):
            raise MissingGroundTruth(f"{path} has no truth sidecar")
        base = read_truth(stem + ".truth") if has_truth else []
        scans.append(EvalScan(os.path.basename(stem), vol, truth_after(base, record, vol.spacing),
                              tamper_kind(record)))
    if not scans:
        raise MissingGroundTruth(f"no scans found in {directory}")
    return scans


# -- external detectors -------------------------------------------------------

class ExternalDetector:
    """Runs a command that reads a raw volume on stdin and prints ``x,y,z,diameter_mm`` lines."""

    def __init__(self, command: Sequence[str], timeout: float = 600.0, name: Optional[str] = None):
        self.command = list(command)
        self.timeout = timeout
        self.name = name or os.path.basename(self.command[0])

    def __call__(self, volume: Volume) -> List[Detection]:
        proc = subprocess.run(self.command, input=encode_raw(volume), capture_output=True,
                              timeout=self.timeout)
        if proc.returncode != 0:
            raise CTGanSimError(
                f"detector {self.name} exited {proc.returncode}: {proc.stderr.decode(errors='replace').strip()}")
        return parse_detections(proc.stdout.decode())


def parse_detections(text: str) -> List[Detection]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise CTGanSimError(f"bad detection line {line!r}")
        x, y, z, d = (float(p) for p in parts)
        out.append(Detection((int(round(x)), int(round(y)), int(round(z))), d, 0))
    return out


def format_detections(detections: Iterable[Detection]) -> str:
    return "".join(f"{d.center[0]},{d.center[1]},{d.center[2]},{d.diameter_mm:.3f}\n" for d in detections)


# -- report files ---------------------------------------------------------------

REPORT_COLUMNS = ["detector", "level", "tp", "fp", "fn", "tn", "tpr", "fpr", "tnr", "fnr"]
ATTACK_COLUMNS = ["detector", "attack", "n", "successes", "success_rate"]


def _fmt(x: float) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else f"{x:.6f}"


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report.results:
        for level, c in (("instance", r.instance), ("patient", r.patient)):
            w.writerow([r.detector, level, c.tp, c.fp, c.fn, c.tn, _fmt(c.tpr), _fmt(c.fpr), _fmt(c.tnr), _fmt(c.fnr)])
    return buf.getvalue()


def attacks_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ATTACK_COLUMNS)
    for r in report.results:
        for a in (r.injection, r.removal):
            w.writerow([r.detector, a.attack, a.n, a.successes, _fmt(a.rate)])
    return buf.getvalue()


def read_report_csv(text: str) -> Dict[Tuple[str, str], Counts]:
    rows = csv.DictReader(io.StringIO(text))
    return {(row["detector"], row["level"]): Counts(int(row["tp"]), int(row["fp"]), int(row["fn"]), int(row["tn"]))
            for row in rows}


def attack_svg(report: EvalReport, width: int = 480, bar_h: int = 22) -> str:
    """Horizontal bar chart of attack success rates."""
    rows = [(f"{r.detector} {a.attack}", a.rate) for r in report.results for a in (r.injection, r.removal)]
    label_w, pad = 180, 8
    height = pad * 2 + len(rows) * (bar_h + pad)
    plot_w = width - label_w - 60
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for i, (label, rate) in enumerate(rows):
        y = pad + i * (bar_h + pad)
        val = 0.0 if math.isnan(rate) else rate
        parts.append(f'<text x="{label_w - 6}" y="{y + bar_h * 0.7:.1f}" text-anchor="end">{escape(label)}</text>')
        parts.append(f'<rect x="{label_w}" y="{y}" width="{plot_w * val:.1f}" height="{bar_h}" fill="#4a78b0"/>')
        text = "n/a" if math.isnan(rate) else f"{100 * rate:.1f}%"
        parts.append(f'<text x="{label_w + plot_w * val + 4:.1f}" y="{y + bar_h * 0.7:.1f}">{text}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def report_emit(report: EvalReport, out_dir, formats: Sequence[str] = ("csv",)) -> List[str]:
    """Write ``report.csv`` and ``attacks.csv`` (always) and ``attacks.svg`` if requested."""
    unknown = set(formats) - {"csv", "svg"}
    if unknown:
        raise ValueError(f"unknown report formats {sorted(unknown)}")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for name, text in (("report.csv", report_csv(report)), ("attacks.csv", attacks_csv(report))):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            fh.write(text)
        written.append(path)
    if "svg" in formats:
        path = os.path.join(out_dir, "attacks.svg")
        with open(path, "w") as fh:
            fh.write(attack_svg(report))
        written.append(path)
    return written
