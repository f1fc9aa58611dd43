"""Run manifests: the tamper-evident record of a multi-step compression run.

Each step record names the checkpoint it started from (``parent_hash``) and
the checkpoint it wrote (``checkpoint_hash``), so the chain from the input
checkpoint to the final model can be re-verified from the files alone.
"""

import csv
import io
import json
import os
from pathlib import Path
from typing import List

from .errors import ManifestError
from .model.checkpoint import file_digest

MANIFEST_FORMAT = "plrd-manifest"
MANIFEST_VERSION = 1
CSV_COLUMNS = ["step", "r_attn", "r_mlp", "params", "CR", "tokens", "eval_ppl"]


def new_manifest(**fields) -> dict:
    return {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, **fields, "steps": []}


def load_manifest(path) -> dict:
    try:
        m = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if m.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path} is not a run manifest")
    if m.get("version") != MANIFEST_VERSION:
        raise ManifestError(
            f"manifest version {m.get('version')} unsupported (expected {MANIFEST_VERSION})"
        )
    m.setdefault("steps", [])
    return m


def save_manifest(manifest: dict, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def chain_problems(manifest: dict, root) -> List[str]:
    """Every inconsistency between the manifest and the checkpoint files."""
    root = Path(root)
    problems = []
    parent = manifest.get("input_checkpoint_hash")
    for rec in manifest["steps"]:
        k = rec.get("step")
        if rec.get("parent_hash") != parent:
            problems.append(f"step {k}: parent hash does not match previous checkpoint")
        path = root / rec["checkpoint"]
        if not path.exists():
            problems.append(f"step {k}: checkpoint {rec['checkpoint']} missing")
        elif file_digest(path) != rec.get("checkpoint_hash"):
            problems.append(f"step {k}: checkpoint {rec['checkpoint']} hash mismatch")
        parent = rec.get("checkpoint_hash")
    return problems


def verify_manifest(path) -> dict:
    """Load and verify the hash chain; raises :class:`ManifestError`."""
    m = load_manifest(path)
    problems = chain_problems(m, Path(path).parent)
    if problems:
        raise ManifestError("; ".join(problems))
    return m


def _na(v):
    return "NA" if v is None else str(v)


def report_rows(manifest: dict) -> List[List[str]]:
    rows = []
    for rec in sorted(manifest["steps"], key=lambda r: r["step"]):
        ppl = rec.get("eval", {}).get("perplexity")
        rows.append([
            str(rec["step"]),
            _na(rec.get("r_attn")),
            _na(rec.get("r_mlp")),
            str(rec["params"]),
            f"{rec['cr']:.6f}",
            str(rec["tokens"]),
            "NA" if ppl is None else f"{ppl:.6f}",
        ])
    return rows


def render_csv(manifest: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(report_rows(manifest))
    return buf.getvalue()


def render_table(manifest: dict) -> str:
    rows = [CSV_COLUMNS] + report_rows(manifest)
    widths = [max(len(r[i]) for r in rows) for i in range(len(CSV_COLUMNS))]
    lines = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    return "\n".join(lines) + "\n"
