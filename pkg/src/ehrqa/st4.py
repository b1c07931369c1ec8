"""Evidence alignment: map each answer sentence to its supporting note
sentences via link-level ensemble voting.

Votes aggregate at the (answer_id, evidence_id) pair level across all
ensemble runs. The merge threshold can be swept on dev gold and persisted
to best_vote_threshold.txt for reuse at test time. An embedding recall
pass can add back links whose sentence similarity clears tau after the
vote.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .core import (
    Case,
    ConfigError,
    EhrqaError,
    MergePolicy,
    SamplingPlan,
    id_sort_key,
    resolve_threshold,
)
from .metrics import micro_prf
from .parsing import parse_alignment
from .prompting import answer_block, load_template, render_prompt
from .providers import Embedder, GenRequest, Generator, cosine, gather_responses

logger = logging.getLogger(__name__)

Link = tuple[str, str]
AlignmentList = list[tuple[str, list[str]]]

THRESHOLD_FILENAME = "best_vote_threshold.txt"


@dataclass(frozen=True)
class LinkVoteTally:
    votes: dict[Link, int]
    total_votes: int

    def __post_init__(self) -> None:
        if self.total_votes < 1:
            raise ConfigError("tally needs total_votes >= 1")
        bad = {k: c for k, c in self.votes.items() if not 1 <= c <= self.total_votes}
        if bad:
            raise ConfigError(f"vote counts outside [1, total_votes]: {bad}")


@dataclass(frozen=True)
class RecallConfig:
    enabled: bool = False
    tau: float = 0.68

    def __post_init__(self) -> None:
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must be in (0, 1], got {self.tau}")


def tally_from_runs(runs: list[list[tuple[str, set[str]]]], valid_answer_ids=None) -> LinkVoteTally:
    """Count each (answer_id, evidence_id) link once per run."""
    votes: dict[Link, int] = {}
    for run in runs:
        links: set[Link] = set()
        for aid, ev_ids in run:
            if valid_answer_ids is not None and aid not in valid_answer_ids:
                continue
            links.update((aid, eid) for eid in ev_ids)
        for link in links:
            votes[link] = votes.get(link, 0) + 1
    return LinkVoteTally(votes=votes, total_votes=len(runs))


def run_ensemble(
    case: Case,
    shots,
    plan: SamplingPlan,
    provider: Generator,
    full_answer_context: bool = True,
    answers: list[tuple[str, str]] | None = None,
    clinician_question: str | None = None,
    max_workers: int = 4,
) -> LinkVoteTally:
    """One parse per run; unparseable runs vote for nothing."""
    answer_sentences = answers if answers is not None else list(case.clinician_answer_sentences)
    if not answer_sentences:
        raise EhrqaError(f"case {case.case_id}: no answer sentences to align")
    extra: dict[str, str] = {"answer_block": answer_block(answer_sentences)}
    if full_answer_context and case.clinician_answer_paragraph:
        extra["full_answer_block"] = (
            f"\nFull clinician answer (for context):\n{case.clinician_answer_paragraph}\n"
        )
    if clinician_question is not None:
        extra["clinician_question"] = clinician_question
    messages = tuple(render_prompt(load_template("st4"), case, shots, extra=extra))
    requests = [
        GenRequest(
            deployment_name=deployment,
            messages=messages,
            temperature=temperature,
            request_tag=f"{case.case_id}/st4/{deployment}/{sample}",
            sample_index=sample,
        )
        for deployment, temperature, sample in plan.runs()
    ]
    outcomes = gather_responses(provider, requests, max_workers=max_workers)
    runs: list[list[tuple[str, set[str]]]] = []
    parsed_any = False
    for outcome in outcomes:
        alignment: list[tuple[str, set[str]]] = []
        if outcome.ok:
            try:
                alignment = parse_alignment(outcome.response.text)
                parsed_any = True
            except Exception as exc:
                logger.warning(
                    "st4 run %s unparseable, counting as empty: %s",
                    outcome.request.request_tag,
                    exc,
                )
        runs.append(alignment)
    if not parsed_any:
        logger.warning("case %s: every st4 run failed to parse", case.case_id)
    valid = {aid for aid, _ in answer_sentences}
    return tally_from_runs(runs, valid_answer_ids=valid)


def links_at_threshold(tally: LinkVoteTally, threshold: int, valid_note_ids) -> set[Link]:
    valid = set(valid_note_ids)
    return {
        link
        for link, count in tally.votes.items()
        if count >= threshold and link[1] in valid
    }


def merge_links(
    tally: LinkVoteTally,
    policy: MergePolicy,
    case: Case,
    answer_ids: list[str] | None = None,
) -> AlignmentList:
    """Threshold the tally into a full alignment: every answer_id present,
    possibly with an empty evidence list."""
    threshold = resolve_threshold(policy, tally.total_votes)
    kept = links_at_threshold(tally, threshold, case.note_ids)
    all_answers = answer_ids if answer_ids is not None else list(case.answer_ids)
    by_answer: dict[str, list[str]] = {aid: [] for aid in all_answers}
    for aid, eid in kept:
        by_answer.setdefault(aid, []).append(eid)
    return [
        (aid, sorted(ev, key=id_sort_key))
        for aid, ev in sorted(by_answer.items(), key=lambda kv: id_sort_key(kv[0]))
    ]


def sweep_threshold(
    dev_runs: list[tuple[LinkVoteTally, AlignmentList, Case]],
    out_path: str | Path | None = None,
) -> tuple[int, list[dict]]:
    """Exhaustively evaluate every threshold on dev gold and keep the best.

    Returns (best threshold, frontier rows); ties resolve to the smallest
    threshold. The winning integer is persisted bare, newline-terminated.
    """
    if not dev_runs:
        raise EhrqaError("threshold sweep needs at least one dev case")
    for _, gold, case in dev_runs:
        if gold is None:
            raise EhrqaError(f"case {case.case_id} has no gold alignments for the sweep")
    max_votes = max(tally.total_votes for tally, _, _ in dev_runs)
    frontier: list[dict] = []
    best_theta, best_f1 = 1, -1.0
    for theta in range(1, max_votes + 1):
        pairs = []
        for tally, gold, case in dev_runs:
            pred = links_at_threshold(tally, theta, case.note_ids)
            gold_links = {(aid, eid) for aid, ev in gold for eid in ev}
            pairs.append((pred, gold_links))
        prf = micro_prf(pairs)
        frontier.append(
            {
                "theta": theta,
                "micro_p": prf.precision,
                "micro_r": prf.recall,
                "micro_f1": prf.f1,
            }
        )
        if prf.f1 > best_f1:
            best_theta, best_f1 = theta, prf.f1
    if out_path is not None:
        Path(out_path).write_text(f"{best_theta}\n", encoding="utf-8")
    return best_theta, frontier


def read_best_threshold(path: str | Path) -> int:
    """Read the persisted sweep result back, verbatim."""
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text.isdigit() or int(text) < 1:
        raise ConfigError(f"{path} does not contain a positive integer: {text!r}")
    return int(text)


def recall_augment(
    alignment: AlignmentList,
    case: Case,
    embedder: Embedder,
    config: RecallConfig,
    answers: list[tuple[str, str]] | None = None,
) -> AlignmentList:
    """Add (answer, note) links whose embedding cosine clears tau.

    Never removes links; on embedding failure the input comes back
    unchanged.
    """
    if not config.enabled:
        return alignment
    answer_sentences = answers if answers is not None else list(case.clinician_answer_sentences)
    if not answer_sentences or not case.note:
        return alignment
    try:
        answer_texts = [text for _, text in answer_sentences]
        note_texts = [s.text for s in case.note]
        vectors = embedder.embed(answer_texts + note_texts)
    except Exception as exc:
        logger.warning(
            "case %s: recall augmentation skipped (embedding failure): %s",
            case.case_id,
            exc,
        )
        return alignment
    answer_vecs = vectors[: len(answer_texts)]
    note_vecs = vectors[len(answer_texts) :]
    existing = {aid: set(ev) for aid, ev in alignment}
    for (aid, _), avec in zip(answer_sentences, answer_vecs):
        for sentence, nvec in zip(case.note, note_vecs):
            if sentence.id in existing.get(aid, set()):
                continue
            if cosine(avec, nvec) >= config.tau:
                existing.setdefault(aid, set()).add(sentence.id)
    return [
        (aid, sorted(ev, key=id_sort_key))
        for aid, ev in sorted(existing.items(), key=lambda kv: id_sort_key(kv[0]))
    ]


_SENTENCE_SPLIT = re.compile(r"(?<=[.!?])\s+")


def segment_answer(answer_text: str) -> list[tuple[str, str]]:
    """Number the sentences of a generated answer for pipeline-mode
    alignment (dev mode uses the key's answer sentences instead)."""
    parts = [p.strip() for p in _SENTENCE_SPLIT.split(answer_text.strip()) if p.strip()]
    return [(str(i + 1), part) for i, part in enumerate(parts)]


@dataclass
class St4Result:
    case_id: str
    alignments: AlignmentList
    tally: LinkVoteTally | None = None


def run_case(
    case: Case,
    shots,
    plan: SamplingPlan | None,
    provider: Generator | None,
    policy: MergePolicy,
    recall: RecallConfig = RecallConfig(),
    embedder: Embedder | None = None,
    full_answer_context: bool = True,
    answers: list[tuple[str, str]] | None = None,
    clinician_question: str | None = None,
    max_workers: int = 4,
) -> St4Result:
    """Ensemble alignment for one case; with no plan this degrades to the
    embedding-only baseline (vote nothing, recall everything)."""
    answer_sentences = answers if answers is not None else list(case.clinician_answer_sentences)
    answer_ids = [aid for aid, _ in answer_sentences]
    if plan is None or provider is None:
        alignment: AlignmentList = [(aid, []) for aid in answer_ids]
        tally = None
    else:
        tally = run_ensemble(
            case,
            shots,
            plan,
            provider,
            full_answer_context=full_answer_context,
            answers=answers,
            clinician_question=clinician_question,
            max_workers=max_workers,
        )
        alignment = merge_links(tally, policy, case, answer_ids=answer_ids)
    if recall.enabled:
        if embedder is None:
            raise ConfigError("recall augmentation needs an embedder")
        alignment = recall_augment(alignment, case, embedder, recall, answers=answers)
    return St4Result(case_id=case.case_id, alignments=alignment, tally=tally)
