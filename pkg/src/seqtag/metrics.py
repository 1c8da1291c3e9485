"""Evaluation: token accuracy, chunk F1 over B/I/O tags, and the
Levenshtein-aligned concept error rate."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError, FormatError, MetricUndefinedError


@dataclass(frozen=True)
class Chunk:
    label: str  # type without the B-/I- prefix
    start: int  # inclusive token indices
    end: int


@dataclass
class EvalReport:
    token_accuracy: float
    precision: float
    recall: float
    f1: float
    cer: float
    n_tokens: int
    n_gold_chunks: int
    n_pred_chunks: int

    def key_values(self) -> str:
        return (
            f"accuracy={self.token_accuracy:.6f} precision={self.precision:.6f} "
            f"recall={self.recall:.6f} f1={self.f1:.6f} cer={self.cer:.6f} "
            f"tokens={self.n_tokens} gold_chunks={self.n_gold_chunks} "
            f"pred_chunks={self.n_pred_chunks}"
        )

    def table(self) -> str:
        rows = [
            ("token accuracy", f"{self.token_accuracy:.4f}"),
            ("chunk precision", f"{self.precision:.4f}"),
            ("chunk recall", f"{self.recall:.4f}"),
            ("chunk F1", f"{self.f1:.4f}"),
            ("concept error rate", f"{self.cer:.4f}"),
            ("tokens", str(self.n_tokens)),
            ("gold chunks", str(self.n_gold_chunks)),
            ("predicted chunks", str(self.n_pred_chunks)),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name.ljust(width)}  {value}" for name, value in rows)


def _split_tag(tag: str):
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in ("B", "I"):
        return tag[0], tag[2:]
    raise FormatError(f"malformed tag {tag!r}: expected O, B-<type> or I-<type>")


def bio_to_chunks(tags) -> list[Chunk]:
    """Reconstruct spans from token tags.

    B-X opens a span, I-X continues a matching open span, O closes.  An
    orphan I-X (at start, after O, or after a different type) is repaired
    by reading it as B-X.
    """
    chunks: list[Chunk] = []
    open_label = None
    start = 0
    for i, tag in enumerate(tags):
        prefix, label = _split_tag(tag)
        continues = prefix == "I" and open_label == label
        if open_label is not None and not continues:
            chunks.append(Chunk(open_label, start, i - 1))
            open_label = None
        if prefix in ("B", "I") and not continues:
            open_label, start = label, i
    if open_label is not None:
        chunks.append(Chunk(open_label, start, len(tags) - 1))
    return chunks


def chunks_to_bio(chunks, length: int) -> list[str]:
    tags = ["O"] * length
    for chunk in chunks:
        tags[chunk.start] = f"B-{chunk.label}"
        for i in range(chunk.start + 1, chunk.end + 1):
            tags[i] = f"I-{chunk.label}"
    return tags


def chunk_f1(gold_sentences, pred_sentences):
    """Micro-averaged precision/recall/F1; a predicted chunk is correct
    only when type, start, and end all match a gold chunk."""
    _check_aligned(gold_sentences, pred_sentences)
    n_gold = n_pred = n_correct = 0
    for gold_tags, pred_tags in zip(gold_sentences, pred_sentences):
        gold = set(bio_to_chunks(gold_tags))
        pred = set(bio_to_chunks(pred_tags))
        n_gold += len(gold)
        n_pred += len(pred)
        n_correct += len(gold & pred)
    precision = n_correct / n_pred if n_pred else 0.0
    recall = n_correct / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def levenshtein(a, b) -> int:
    """Unit-cost edit distance, two-row dynamic program."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def concept_error_rate(gold_concepts, pred_concepts) -> float:
    """Corpus-level (insertions + deletions + substitutions) / gold length
    over per-sentence concept-label sequences.  Can exceed 1."""
    if len(gold_concepts) != len(pred_concepts):
        raise ContractError(
            f"{len(gold_concepts)} gold vs {len(pred_concepts)} predicted sentences"
        )
    total_gold = sum(len(g) for g in gold_concepts)
    if total_gold == 0:
        raise MetricUndefinedError("concept error rate undefined: no gold concepts")
    edits = sum(levenshtein(g, p) for g, p in zip(gold_concepts, pred_concepts))
    return edits / total_gold


def token_accuracy(gold_sentences, pred_sentences) -> float:
    _check_aligned(gold_sentences, pred_sentences)
    total = correct = 0
    for gold, pred in zip(gold_sentences, pred_sentences):
        total += len(gold)
        correct += sum(g == p for g, p in zip(gold, pred))
    if total == 0:
        raise ContractError("no tokens to score")
    return correct / total


def _check_aligned(gold_sentences, pred_sentences):
    if len(gold_sentences) != len(pred_sentences):
        raise ContractError(
            f"{len(gold_sentences)} gold vs {len(pred_sentences)} predicted sentences"
        )
    for i, (g, p) in enumerate(zip(gold_sentences, pred_sentences)):
        if len(g) != len(p):
            raise ContractError(f"sentence {i}: {len(g)} gold vs {len(p)} predicted tags")


def concept_sequence(tags) -> list[str]:
    """Chunk types in order of appearance, the unit the error rate aligns."""
    return [chunk.label for chunk in bio_to_chunks(tags)]


def evaluate_tags(gold_sentences, pred_sentences) -> EvalReport:
    """Full report for aligned gold/predicted tag sequences."""
    accuracy = token_accuracy(gold_sentences, pred_sentences)
    precision, recall, f1 = chunk_f1(gold_sentences, pred_sentences)
    gold_concepts = [concept_sequence(tags) for tags in gold_sentences]
    pred_concepts = [concept_sequence(tags) for tags in pred_sentences]
    cer = concept_error_rate(gold_concepts, pred_concepts)
    return EvalReport(
        token_accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        cer=cer,
        n_tokens=sum(len(g) for g in gold_sentences),
        n_gold_chunks=sum(len(g) for g in gold_concepts),
        n_pred_chunks=sum(len(p) for p in pred_concepts),
    )
