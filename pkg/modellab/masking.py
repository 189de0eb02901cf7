"""Attention masks for the three masking regimes.

* causal: query i sees keys j <= i.
* visual-bidirectional: causal, plus every visual query sees every visual
  key.
* no-visual-attention: causal keys, but the attention update of every visual
  query is discarded (its keys and values stay visible to text queries).
"""
import dataclasses
import enum

import numpy as np

# largest mask we are willing to draw as text
ASCII_LIMIT = 4096

FORMATS: set[str] = {"ascii", "pgm"}


class MaskPolicy(enum.Enum):
    """How attention is masked."""

    CAUSAL = "causal"
    VISUAL_BIDIRECTIONAL = "bidir"
    NO_VISUAL_ATTENTION = "no-visual-attention"

    @classmethod
    def parse(cls, token: str) -> "MaskPolicy":
        """Resolve a policy from its CLI/config spelling.

        :param str token: e.g. "causal", "bidir", "no-visual-attention"
        :raises ValueError: if the token names no policy
        """
        aliases = {
            "causal": cls.CAUSAL,
            "bidir": cls.VISUAL_BIDIRECTIONAL,
            "bidirectional": cls.VISUAL_BIDIRECTIONAL,
            "visual-bidirectional": cls.VISUAL_BIDIRECTIONAL,
            "no-visual-attention": cls.NO_VISUAL_ATTENTION,
            "novisattn": cls.NO_VISUAL_ATTENTION,
        }
        key = token.strip().lower().replace("_", "-")
        if key not in aliases:
            raise ValueError(
                f"Unknown mask policy: {token!r}. "
                f"Choose from {sorted(aliases)}")
        return aliases[key]


@dataclasses.dataclass(frozen=True)
class TokenLayout:
    """A sequence split into m system, n visual and o user tokens."""

    m: int
    n: int
    o: int

    def __post_init__(self) -> None:
        for field in ("m", "n", "o"):
            value = getattr(self, field)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(
                    f"Layout counts must be non-negative integers, "
                    f"{field}={value!r}")
        if self.m + self.n + self.o < 1:
            raise ValueError("A layout needs at least one token")

    @property
    def N(self) -> int:  # pylint: disable=invalid-name
        return self.m + self.n + self.o

    @property
    def visual_span(self) -> tuple[int, int]:
        """Half-open [start, stop) of the visual tokens.

        The visual index set is written 1-based as {m+1, ..., m+n}; this is
        the single place it is moved to 0-based {m, ..., m+n-1}.
        """
        return self.m, self.m + self.n

    @property
    def visual_indices(self) -> range:
        return range(*self.visual_span)

    def segments(self) -> list[tuple[int, int, bool]]:
        """Non-empty (start, stop, is_visual) runs in sequence order."""
        start, stop = self.visual_span
        runs = [(0, start, False), (start, stop, True), (stop, self.N, False)]
        return [run for run in runs if run[1] > run[0]]

    @classmethod
    def parse(cls, token: str) -> "TokenLayout":
        """Build a layout from "m,n,o".

        :raises ValueError: if the token is not three integers
        """
        parts = token.split(",")
        if len(parts) != 3 or not all(p.strip().isdigit() for p in parts):
            raise ValueError(f"Layout must look like m,n,o; got {token!r}")
        m, n, o = (int(p) for p in parts)
        return cls(m, n, o)


@dataclasses.dataclass(frozen=True, eq=False)
class AttentionMask:
    """Dense boolean attention structure.

    allowed[i, j] is True when query i may attend to key j. bypass_rows are
    query indices whose attention output is discarded.
    """

    allowed: np.ndarray
    bypass_rows: frozenset[int]
    layout: TokenLayout
    policy: MaskPolicy

    @property
    def N(self) -> int:  # pylint: disable=invalid-name
        return int(self.allowed.shape[0])

    @property
    def allowed_count(self) -> int:
        return int(self.allowed.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return (
            np.array_equal(self.allowed, other.allowed)
            and self.bypass_rows == other.bypass_rows
        )

    def keep_rows(self) -> np.ndarray:
        """[N, 1] float column, 0 on bypass rows and 1 elsewhere."""
        keep = np.ones((self.N, 1), dtype=np.float32)
        for row in self.bypass_rows:
            keep[row, 0] = 0.0
        return keep


def expected_allowed_count(layout: TokenLayout, policy: MaskPolicy) -> int:
    """Closed-form number of allowed entries.

    causal and no-visual-attention: N(N+1)/2, visual-bidirectional adds the
    n(n-1)/2 entries above the diagonal of the visual block.
    """
    count = layout.N * (layout.N + 1) // 2
    if policy is MaskPolicy.VISUAL_BIDIRECTIONAL:
        count += layout.n * (layout.n - 1) // 2
    return count


def build_mask(layout: TokenLayout, policy: MaskPolicy) -> AttentionMask:
    """Build the attention mask for a layout under a policy.

    :param TokenLayout layout: the sequence segmentation
    :param MaskPolicy policy: the masking regime
    :returns: the immutable mask
    :rtype: AttentionMask
    """
    allowed = np.tril(np.ones((layout.N, layout.N), dtype=bool))
    start, stop = layout.visual_span

    if policy is MaskPolicy.VISUAL_BIDIRECTIONAL:
        allowed[start:stop, start:stop] = True

    bypass: frozenset[int] = frozenset()
    if policy is MaskPolicy.NO_VISUAL_ATTENTION:
        bypass = frozenset(layout.visual_indices)

    allowed.setflags(write=False)
    return AttentionMask(allowed, bypass, layout, policy)


def render_mask(mask: AttentionMask, fmt: str) -> bytes:
    """Draw a mask.

    ascii: one line per query row, '#' allowed, '.' masked; allowed entries
    of bypass rows are drawn as 'B'. pgm: binary P5, one pixel per entry,
    255 allowed and 0 masked.

    :param AttentionMask mask: the mask to draw
    :param str fmt: "ascii" or "pgm"
    :returns: the rendering
    :rtype: bytes
    :raises ValueError: on an unsupported format or an oversized ascii mask
    """
    fmt = fmt.lower()
    if fmt not in FORMATS:
        raise ValueError(
            f"Unsupported mask format: {fmt!r}. Choose from {sorted(FORMATS)}")

    if fmt == "pgm":
        header = f"P5\n{mask.N} {mask.N}\n255\n".encode("ascii")
        pixels = np.where(mask.allowed, 255, 0).astype(np.uint8)
        return header + pixels.tobytes()

    if mask.N > ASCII_LIMIT:
        raise ValueError(
            f"ascii rendering is limited to N <= {ASCII_LIMIT}, got {mask.N}")

    lines = []
    for row in range(mask.N):
        mark = "B" if row in mask.bypass_rows else "#"
        lines.append("".join(
            mark if ok else "." for ok in mask.allowed[row]))
    return "\n".join(lines).encode("ascii")
