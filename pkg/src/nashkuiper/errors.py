"""Error type shared by every module.

Each failure carries a short machine-readable ``code`` (for example
``"grid-underresolved"``) plus a free-form detail string. The CLI maps
codes to exit statuses, so the codes are part of the public interface.
"""

from __future__ import annotations


class NKError(Exception):
    """A named failure raised by the numerical pipeline."""

    def __init__(self, code: str, detail: str = "", **context: object) -> None:
        self.code = code
        self.detail = detail
        self.context = dict(context)
        msg = code if not detail else f"{code}: {detail}"
        super().__init__(msg)

    def as_dict(self) -> dict[str, object]:
        out: dict[str, object] = {"code": self.code, "detail": self.detail}
        out.update({k: v for k, v in self.context.items()})
        return out


# codes that indicate a configuration / parameter-gate problem rather than a
# failed numerical check; the CLI exits with status 2 for these
GATE_CODES = frozenset(
    {
        "grid-underresolved",
        "derivative-depth-exceeded",
        "kernel-unresolved",
        "assumption-violated",
        "config-invalid",
        "schedule-infeasible",
        "alpha-out-of-range",
        "not-short",
        "grid-mismatch",
    }
)
