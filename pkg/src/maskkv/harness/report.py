"""Run reports: deterministic ``key<TAB>value`` text grouped by section."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from ..errors import ParseError


@dataclass
class RunResult:
    """Aggregate of one policy at one budget over every seed."""

    policy: str
    budget: int | None  # None for the full-cache reference
    tokens: dict[int, list[int]] = field(default_factory=dict)
    agreement: float = 1.0
    needle_accuracy: float = 0.0
    retained_mass: float = 1.0
    prompt_kv_bytes: float = 0.0
    kv_bytes: float = 0.0
    peak_bytes: float = 0.0
    refresh_prompt: float = 0.0
    refresh_response: float = 0.0
    steps: float = 0.0
    stability: float | None = None

    @property
    def name(self) -> str:
        return "reference" if self.budget is None else f"policy {self.policy} budget {self.budget}"

    def rows(self) -> list[tuple[str, str]]:
        out = [("policy", self.policy),
               ("budget", "full" if self.budget is None else str(self.budget)),
               ("agreement", _fmt(self.agreement)),
               ("needle_accuracy", _fmt(self.needle_accuracy)),
               ("retained_mass", _fmt(self.retained_mass)),
               ("prompt_kv_bytes_total", _fmt(self.prompt_kv_bytes)),
               ("kv_bytes_total", _fmt(self.kv_bytes)),
               ("peak_bytes", _fmt(self.peak_bytes)),
               ("refresh_prompt", _fmt(self.refresh_prompt)),
               ("refresh_response", _fmt(self.refresh_response)),
               ("steps", _fmt(self.steps))]
        if self.stability is not None:
            out.append(("stability_spearman", _fmt(self.stability)))
        for seed in sorted(self.tokens):
            out.append((f"tokens.{seed}", " ".join(str(t) for t in self.tokens[seed])))
        return out


@dataclass
class RunReport:
    config: list[tuple[str, str]]
    reference: RunResult
    results: list[RunResult] = field(default_factory=list)
    memory: list[tuple[str, str]] = field(default_factory=list)

    def sections(self) -> list[tuple[str, list[tuple[str, str]]]]:
        secs = [("config", list(self.config))]
        if self.memory:
            secs.append(("memory", list(self.memory)))
        secs.append((self.reference.name, self.reference.rows()))
        secs.extend((r.name, r.rows()) for r in self.results)
        return secs

    def to_text(self) -> str:
        return format_sections(self.sections())

    def result(self, policy: str, budget: int) -> RunResult:
        for r in self.results:
            if r.policy == policy and r.budget == budget:
                return r
        raise KeyError((policy, budget))


def _fmt(x) -> str:
    if isinstance(x, (int,)) and not isinstance(x, bool):
        return str(x)
    x = float(x)
    if math.isnan(x):
        return "nan"
    if x == int(x) and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.6f}"


def format_sections(sections) -> str:
    lines = []
    for name, rows in sections:
        lines.append(f"[{name}]")
        for key, value in rows:
            if "\t" in key or "\n" in key or "\t" in value or "\n" in value:
                raise ValueError(f"report field {key!r} contains a tab or newline")
            lines.append(f"{key}\t{value}")
        lines.append("")
    return "\n".join(lines)


def parse_report(text: str) -> list[tuple[str, list[tuple[str, str]]]]:
    """Inverse of :func:`format_sections`; errors name the line number."""
    sections: list[tuple[str, list[tuple[str, str]]]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("[") and line.endswith("]"):
            sections.append((line[1:-1], []))
            continue
        if not sections:
            raise ParseError("row before the first section header", lineno, unit="line")
        key, sep, value = line.partition("\t")
        if not sep or not key:
            raise ParseError(f"expected key<TAB>value, got {line!r}", lineno, unit="line")
        sections[-1][1].append((key, value))
    if not sections:
        raise ParseError("empty report", 1, unit="line")
    return sections


def pretty(sections, show_tokens: bool = False) -> str:
    """Human-readable rendering plus a policy x budget summary table."""
    out = []
    table = []
    for name, rows in sections:
        rows = [(k, v) for k, v in rows if show_tokens or not k.startswith("tokens.")]
        out.append(name)
        width = max((len(k) for k, _ in rows), default=0)
        out.extend(f"  {k.ljust(width)}  {v}" for k, v in rows)
        out.append("")
        d = dict(rows)
        if name.startswith("policy "):
            table.append((d.get("policy", "?"), d.get("budget", "?"), d.get("agreement", ""),
                          d.get("needle_accuracy", ""), d.get("retained_mass", "")))
    if table:
        head = ("policy", "budget", "agreement", "needle", "mass")
        widths = [max(len(str(r[i])) for r in table + [head]) for i in range(len(head))]
        out.append("summary")
        for r in [head] + table:
            out.append("  " + "  ".join(str(c).ljust(w) for c, w in zip(r, widths)))
        out.append("")
    return "\n".join(out)
