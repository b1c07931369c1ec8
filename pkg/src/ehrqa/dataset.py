"""Load, validate, save, and split case files.

The canonical on-disk format is UTF-8 JSONL: one case object per line with
a fixed field order, so save(load(path)) is byte-stable. A ``key_overlay``
adapter merges a separate answer-key file (gold fields keyed by case_id)
onto a questions-only file, mirroring setups where inputs and keys ship
separately.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .core import Case, CaseValidationError, EhrqaError, NoteSentence, id_sort_key

SPLITS = ("dev", "test", "custom")

# Canonical field order for serialization
_FIELDS = (
    "case_id",
    "patient_question",
    "clinician_question",
    "note",
    "answer_sentences",
    "answer_paragraph",
    "gold_evidence",
    "gold_alignments",
)


@dataclass(frozen=True)
class CaseFile:
    cases: tuple[Case, ...]
    split_label: str = "custom"

    def __post_init__(self) -> None:
        if self.split_label not in SPLITS:
            raise EhrqaError(f"unknown split label {self.split_label!r}")
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseValidationError(f"duplicate case_ids: {dupes}")

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]


def case_to_record(case: Case) -> dict:
    record = {
        "case_id": case.case_id,
        "patient_question": case.patient_question,
        "clinician_question": case.clinician_question,
        "note": [{"id": s.id, "text": s.text} for s in case.note],
        "answer_sentences": [
            {"answer_id": aid, "text": text}
            for aid, text in case.clinician_answer_sentences
        ],
        "answer_paragraph": case.clinician_answer_paragraph,
        "gold_evidence": (
            sorted(case.gold_evidence, key=id_sort_key)
            if case.gold_evidence is not None
            else None
        ),
        "gold_alignments": (
            [
                {"answer_id": aid, "evidence_ids": sorted(ev, key=id_sort_key)}
                for aid, ev in case.gold_alignments
            ]
            if case.gold_alignments is not None
            else None
        ),
    }
    return {k: record[k] for k in _FIELDS}


def case_from_record(record: dict, locus: str = "") -> Case:
    try:
        note = tuple(
            NoteSentence(id=str(s["id"]), text=s["text"]) for s in record["note"]
        )
        answers = tuple(
            (str(a["answer_id"]), a["text"])
            for a in record.get("answer_sentences") or []
        )
        gold_evidence = record.get("gold_evidence")
        gold_alignments = record.get("gold_alignments")
        return Case(
            case_id=str(record["case_id"]),
            patient_question=record["patient_question"],
            clinician_question=record.get("clinician_question"),
            note=note,
            clinician_answer_sentences=answers,
            clinician_answer_paragraph=record.get("answer_paragraph"),
            gold_evidence=(
                frozenset(str(i) for i in gold_evidence)
                if gold_evidence is not None
                else None
            ),
            gold_alignments=(
                tuple(
                    (str(a["answer_id"]), frozenset(str(i) for i in a["evidence_ids"]))
                    for a in gold_alignments
                )
                if gold_alignments is not None
                else None
            ),
        )
    except KeyError as exc:
        raise CaseValidationError(f"{locus}: missing field {exc}") from exc


def _read_records(path: Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise EhrqaError(f"{path}:{lineno}: malformed record: {exc}") from exc
    return records


def load_cases(
    path: str | Path,
    format: str = "canonical",
    key_path: str | Path | None = None,
    split_label: str = "custom",
) -> CaseFile:
    """Load a case file, validating every case invariant.

    ``canonical`` reads self-contained case records. ``key_overlay`` reads
    question records from ``path`` and merges gold fields (answers,
    evidence, alignments) from the answer-key file at ``key_path``.
    """
    path = Path(path)
    if not path.exists():
        raise EhrqaError(f"case file not found: {path}")
    records = _read_records(path)

    if format == "key_overlay":
        if key_path is None:
            raise EhrqaError("key_overlay format requires key_path")
        key_path = Path(key_path)
        if not key_path.exists():
            raise EhrqaError(f"key file not found: {key_path}")
        keys = {str(r["case_id"]): r for r in _read_records(key_path)}
        merged = []
        for record in records:
            cid = str(record["case_id"])
            overlay = keys.get(cid, {})
            combined = dict(record)
            for field in (
                "clinician_question",
                "answer_sentences",
                "answer_paragraph",
                "gold_evidence",
                "gold_alignments",
            ):
                if overlay.get(field) is not None:
                    combined[field] = overlay[field]
            merged.append(combined)
        records = merged
    elif format != "canonical":
        raise EhrqaError(f"unknown case file format {format!r}")

    cases = tuple(
        case_from_record(r, locus=f"{path}:record {i + 1}")
        for i, r in enumerate(records)
    )
    return CaseFile(cases=cases, split_label=split_label)


def save_cases(case_file: CaseFile, path: str | Path) -> None:
    """Write the canonical JSONL form (fixed field order, no trailing spaces)."""
    path = Path(path)
    lines = [
        json.dumps(case_to_record(c), ensure_ascii=False, separators=(", ", ": "))
        for c in case_file.cases
    ]
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def case_sort_key(case: Case):
    return id_sort_key(case.case_id)


def few_shot_pool(
    case_file: CaseFile,
    exclude_case_id: str | None = None,
    require_nonempty_gold: bool = False,
) -> list[Case]:
    """Leave-one-out candidate pool, ordered by case_id."""
    pool = [c for c in case_file.cases if c.case_id != exclude_case_id]
    if require_nonempty_gold:
        pool = [c for c in pool if c.gold_evidence]
    return sorted(pool, key=case_sort_key)


def toy_dataset_path() -> Path:
    """Bundled three-case synthetic dev set used by smoke tests and docs."""
    return Path(str(resources.files("ehrqa").joinpath("data/toy_cases.jsonl")))
