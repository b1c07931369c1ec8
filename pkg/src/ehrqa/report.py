"""Corpus-level score reports shaped like the shared-task leaderboard.

Set/link subtasks report micro and macro PRF; generative subtasks report
the native lexical metrics plus an overall mean over whatever metrics are
available. Semantic scorers that need model weights (BERT-style similarity
and friends) plug in through an external subprocess protocol: JSON records
on stdin, one score per line on stdout.
"""

from __future__ import annotations

import json
import subprocess
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from .core import EhrqaError
from .metrics import (
    PRF,
    bleu,
    case_prf,
    flatten_links,
    leaderboard_mean,
    link_prf,
    macro_prf,
    micro_prf,
    rouge_lsum,
    rouge_n,
    sari,
)

def _pct(value: float) -> float:
    return round(100.0 * value, 2)


def score_id_sets(
    pred: dict[str, Iterable[str]], gold: dict[str, Iterable[str]]
) -> dict[str, float]:
    """Micro and macro PRF (0-100) over per-case ID sets."""
    _check_alignment_of_ids(pred, gold)
    pairs = [(pred[cid], gold[cid]) for cid in sorted(gold)]
    micro, macro = micro_prf(pairs), macro_prf(pairs)
    return _set_row(micro, macro)


def score_alignments(pred: dict, gold: dict) -> dict[str, float]:
    """Micro and macro link PRF (0-100) over per-case alignments."""
    _check_alignment_of_ids(pred, gold)
    pairs = [(pred[cid], gold[cid]) for cid in sorted(gold)]
    micro = link_prf(pairs, mode="micro")
    macro = link_prf(pairs, mode="macro")
    return _set_row(micro, macro)


def _set_row(micro: PRF, macro: PRF) -> dict[str, float]:
    return {
        "μP": _pct(micro.precision),
        "μR": _pct(micro.recall),
        "μF1": _pct(micro.f1),
        "mP": _pct(macro.precision),
        "mR": _pct(macro.recall),
        "mF1": _pct(macro.f1),
    }


def _check_alignment_of_ids(pred: dict, gold: dict) -> None:
    missing = sorted(set(gold) - set(pred))
    extra = sorted(set(pred) - set(gold))
    if missing or extra:
        raise EhrqaError(
            f"case_id mismatch between predictions and gold "
            f"(missing={missing}, unexpected={extra})"
        )


def _prf_row(prf: PRF) -> dict[str, float]:
    return {"P": _pct(prf.precision), "R": _pct(prf.recall), "F1": _pct(prf.f1)}


def per_case_id_rows(
    pred: dict[str, Iterable[str]], gold: dict[str, Iterable[str]]
) -> dict[str, dict[str, float]]:
    """Per-case PRF rows (0-100) keyed by case_id."""
    _check_alignment_of_ids(pred, gold)
    return {cid: _prf_row(case_prf(pred[cid], gold[cid])) for cid in sorted(gold)}


def per_case_link_rows(pred: dict, gold: dict) -> dict[str, dict[str, float]]:
    _check_alignment_of_ids(pred, gold)
    return {
        cid: _prf_row(case_prf(flatten_links(pred[cid]), flatten_links(gold[cid])))
        for cid in sorted(gold)
    }


def per_case_generation_rows(
    pairs: dict[str, tuple[str, str]], sources: dict[str, str] | None = None
) -> dict[str, dict[str, float]]:
    rows = {}
    for cid in sorted(pairs):
        candidate, reference = pairs[cid]
        row = {
            "R1": _pct(rouge_n(candidate, reference, 1)),
            "R2": _pct(rouge_n(candidate, reference, 2)),
            "RLsum": _pct(rouge_lsum(candidate, reference)),
            "BLEU": _pct(bleu(candidate, reference)),
        }
        if sources is not None:
            row["SARI"] = round(sari(sources[cid], candidate, reference), 2)
        rows[cid] = row
    return rows


def score_generation(
    pairs: dict[str, tuple[str, str]],
    sources: dict[str, str] | None = None,
    external_scores: dict[str, dict[str, float]] | None = None,
) -> dict:
    """Average generation metrics over cases.

    ``pairs`` maps case_id -> (candidate, reference). SARI needs a source
    text per case and is skipped (and reported as unavailable) without one.
    ``external_scores`` merges per-metric corpus means from external
    scorers into the overall Score.
    """
    if not pairs:
        raise EhrqaError("no cases to score")
    case_ids = sorted(pairs)
    r1 = [rouge_n(pairs[c][0], pairs[c][1], 1) for c in case_ids]
    r2 = [rouge_n(pairs[c][0], pairs[c][1], 2) for c in case_ids]
    rlsum = [rouge_lsum(pairs[c][0], pairs[c][1]) for c in case_ids]
    bleus = [bleu(pairs[c][0], pairs[c][1]) for c in case_ids]
    columns: dict[str, float] = {
        "R1": _pct(sum(r1) / len(r1)),
        "R2": _pct(sum(r2) / len(r2)),
        "RLsum": _pct(sum(rlsum) / len(rlsum)),
        "BLEU": _pct(sum(bleus) / len(bleus)),
    }
    unavailable = []
    if sources is not None:
        saris = [sari(sources[c], pairs[c][0], pairs[c][1]) for c in case_ids]
        columns["SARI"] = round(sum(saris) / len(saris), 2)
    else:
        unavailable.append("SARI")
    for name, per_case in (external_scores or {}).items():
        values = [per_case[c] for c in case_ids if c in per_case]
        if values:
            columns[name] = round(sum(values) / len(values), 2)
    score = leaderboard_mean(list(columns.values()))
    return {
        "Score": round(score, 2),
        **columns,
        "unavailable_metrics": unavailable,
    }


@dataclass
class ExternalScorer:
    """Subprocess scorer: JSON records on stdin, one float per line out.

    Each input line is {"case_id":..., "candidate":..., "reference":...};
    the scorer must emit exactly one numeric score per input line, in
    order.
    """

    command: Sequence[str]
    name: str = "external"

    def score_pairs(self, pairs: dict[str, tuple[str, str]]) -> dict[str, float]:
        case_ids = sorted(pairs)
        stdin = "\n".join(
            json.dumps(
                {
                    "case_id": cid,
                    "candidate": pairs[cid][0],
                    "reference": pairs[cid][1],
                },
                ensure_ascii=False,
            )
            for cid in case_ids
        )
        proc = subprocess.run(
            list(self.command),
            input=stdin + "\n",
            capture_output=True,
            text=True,
            check=False,
        )
        if proc.returncode != 0:
            raise EhrqaError(
                f"external scorer {self.name!r} failed "
                f"(exit {proc.returncode}): {proc.stderr[:300]}"
            )
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(case_ids):
            raise EhrqaError(
                f"external scorer {self.name!r} returned {len(lines)} scores "
                f"for {len(case_ids)} records"
            )
        try:
            return {cid: float(ln) for cid, ln in zip(case_ids, lines)}
        except ValueError as exc:
            raise EhrqaError(
                f"external scorer {self.name!r} emitted a non-numeric line"
            ) from exc


def format_table(title: str, rows: list[tuple[str, dict]]) -> str:
    """Fixed-width text table: one row per (label, column dict)."""
    columns: list[str] = []
    for _, row in rows:
        for key in row:
            if key != "unavailable_metrics" and key not in columns:
                columns.append(key)
    widths = {c: max(len(c), 8) for c in columns}
    label_width = max([len(title)] + [len(label) for label, _ in rows]) + 2
    lines = [
        title.ljust(label_width)
        + "  ".join(c.rjust(widths[c]) for c in columns)
    ]
    for label, row in rows:
        cells = []
        for c in columns:
            value = row.get(c)
            cells.append(("-" if value is None else f"{value:.2f}").rjust(widths[c]))
        lines.append(label.ljust(label_width) + "  ".join(cells))
    return "\n".join(lines) + "\n"
