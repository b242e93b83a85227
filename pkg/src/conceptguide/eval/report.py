"""Report assembly: one JSON document plus a markdown summary, CSV tables and
matplotlib figures rendered to files.

Reports embed a content hash of every input artifact and never include
timestamps, so identical inputs reproduce the report byte-exactly.
"""

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from ..util import content_hash, read_json, write_json


def build_report(input_paths) -> dict:
    """Collect eval/fidelity/gradcheck JSON artifacts into one document."""
    doc = {"inputs": {}, "concept_accuracy": [], "fidelity": [], "gradcheck": None}
    for p in map(Path, input_paths):
        blob = read_json(p)
        doc["inputs"][p.name] = content_hash(p)
        kind = blob.get("kind")
        if kind == "concept-accuracy":
            doc["concept_accuracy"].append(blob)
        elif kind == "generation-fidelity":
            doc["fidelity"].append(blob)
        elif kind == "gradcheck":
            doc["gradcheck"] = blob
        else:
            raise ValueError(f"{p}: unknown artifact kind {kind!r}")
    doc["concept_accuracy"].sort(key=lambda b: b.get("model", ""))
    doc["fidelity"].sort(key=lambda b: b.get("model", ""))
    return doc


def _accuracy_csv(path, doc):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        concepts = []
        if doc["concept_accuracy"]:
            concepts = sorted(doc["concept_accuracy"][0]["report"]["per_concept"])
        writer.writerow(["model", "split", "n", "accuracy_micro", "accuracy_macro", *concepts])
        for blob in doc["concept_accuracy"]:
            rep = blob["report"]
            writer.writerow(
                [
                    blob.get("model", "?"),
                    rep["split"],
                    rep["n"],
                    f"{rep['accuracy_micro']:.6f}",
                    f"{rep['accuracy_macro']:.6f}",
                    *[f"{rep['per_concept'][c]:.6f}" for c in concepts],
                ]
            )


def _fidelity_csv(path, doc):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model", "condition", "samples", "guidance", "concept", "target", "satisfaction", "joint"])
        for blob in doc["fidelity"]:
            for row in blob["rows"]:
                if not row["per_concept"]:
                    writer.writerow([blob.get("model", "?"), row["condition"], row["samples"],
                                     row["guidance"], "", "", "", ""])
                for cname, entry in sorted(row["per_concept"].items()):
                    writer.writerow(
                        [
                            blob.get("model", "?"),
                            row["condition"],
                            row["samples"],
                            row["guidance"],
                            cname,
                            entry["target"],
                            f"{entry['satisfaction']:.6f}",
                            f"{row['joint']:.6f}",
                        ]
                    )


def _accuracy_figure(path, doc):
    fig, ax = plt.subplots(figsize=(7, 3.2))
    models = [b.get("model", "?") for b in doc["concept_accuracy"]]
    micro = [b["report"]["accuracy_micro"] for b in doc["concept_accuracy"]]
    macro = [b["report"]["accuracy_macro"] for b in doc["concept_accuracy"]]
    x = np.arange(len(models))
    ax.bar(x - 0.18, micro, width=0.36, label="micro")
    ax.bar(x + 0.18, macro, width=0.36, label="macro")
    ax.set_xticks(x, models, rotation=15)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("concept accuracy")
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "conceptguide"})
    plt.close(fig)


def _fidelity_figure(path, doc):
    rows = []
    labels = []
    for blob in doc["fidelity"]:
        for row in blob["rows"]:
            if row["joint"] is None:
                continue
            labels.append(f"{blob.get('model', '?')}: {row['condition']}")
            rows.append(row["joint"])
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(4, len(rows))))
    y = np.arange(len(rows))
    ax.barh(y, rows, color="#4878cf")
    ax.set_yticks(y, labels, fontsize=7)
    ax.set_xlim(0, 1.02)
    ax.set_xlabel("joint predicate satisfaction")
    ax.invert_yaxis()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "conceptguide"})
    plt.close(fig)


def _per_concept_figure(path, doc):
    fig, ax = plt.subplots(figsize=(7.5, 3.2))
    for blob in doc["concept_accuracy"]:
        per = blob["report"]["per_concept"]
        names = sorted(per)
        ax.plot(range(len(names)), [per[n] for n in names], marker="o", label=blob.get("model", "?"))
    if doc["concept_accuracy"]:
        ax.set_xticks(range(len(names)), names, rotation=30, fontsize=7)
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("per-concept accuracy")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": "conceptguide"})
    plt.close(fig)


def _markdown(doc, figures, extra_images):
    lines = ["# Evaluation report", ""]
    if doc["concept_accuracy"]:
        lines += ["## Concept accuracy", "", "| model | split | micro | macro |", "|---|---|---|---|"]
        for blob in doc["concept_accuracy"]:
            rep = blob["report"]
            lines.append(
                f"| {blob.get('model', '?')} | {rep['split']} | {rep['accuracy_micro']:.4f} | {rep['accuracy_macro']:.4f} |"
            )
        lines.append("")
    if doc["fidelity"]:
        lines += ["## Generation fidelity", "", "| model | condition | joint |", "|---|---|---|"]
        for blob in doc["fidelity"]:
            for row in blob["rows"]:
                joint = "n/a" if row["joint"] is None else f"{row['joint']:.4f}"
                lines.append(f"| {blob.get('model', '?')} | {row['condition']} | {joint} |")
        lines.append("")
    if doc["gradcheck"]:
        lines += ["## Gradient checks", ""]
        for term, entry in sorted(doc["gradcheck"]["report"]["terms"].items()):
            status = "pass" if entry["passed"] else "FAIL"
            lines.append(f"- {term}: max rel err {entry['max_rel_err']:.2e} ({status})")
        lines.append("")
    if figures:
        lines += ["## Figures", ""]
        for fig in figures:
            lines.append(f"![{Path(fig).stem}]({fig})")
        lines.append("")
    if extra_images:
        lines += ["## Sample grids and overlays", ""]
        for img in extra_images:
            lines.append(f"![{Path(img).stem}]({img})")
        lines.append("")
    lines += ["## Input hashes", ""]
    for name, digest in sorted(doc["inputs"].items()):
        lines.append(f"- `{name}`: `{digest}`")
    lines.append("")
    return "\n".join(lines)


def render_report(input_paths, out_dir, extra_images=()):
    """Write report.json, report.md, CSV tables and PNG figures under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = build_report(input_paths)

    (out_dir / "figures").mkdir(parents=True, exist_ok=True)
    figures = []
    if doc["concept_accuracy"]:
        _accuracy_csv(out_dir / "accuracy.csv", doc)
        _accuracy_figure(out_dir / "figures" / "accuracy.png", doc)
        _per_concept_figure(out_dir / "figures" / "per_concept.png", doc)
        figures += ["figures/accuracy.png", "figures/per_concept.png"]
    if doc["fidelity"]:
        _fidelity_csv(out_dir / "fidelity.csv", doc)
        _fidelity_figure(out_dir / "figures" / "fidelity.png", doc)
        figures.append("figures/fidelity.png")

    copied = []
    for img in extra_images:
        src = Path(img)
        dst = out_dir / "figures" / src.name
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(src.read_bytes())
        copied.append(f"figures/{src.name}")

    write_json(out_dir / "report.json", doc)
    (out_dir / "report.md").write_text(_markdown(doc, figures, copied))
    return out_dir / "report.json"
