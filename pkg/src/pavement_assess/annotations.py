"""Distress taxonomy, PCI classes, annotation records and the caption grammar.

Captions are space-tokenized with detached punctuation, e.g.::

    The image shows high severity block cracking . Distresses absent : potholes .

`render_caption` and `parse_caption` are inverses on canonical output, and the
parser also accepts the phrasing variants seen in hand-written annotations.
"""

from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator


class DistressType(str, enum.Enum):
    LONGITUDINAL_CRACKING = "longitudinal_cracking"
    TRANSVERSE_CRACKING = "transverse_cracking"
    POTHOLE = "pothole"
    PATCHING = "patching"
    BLOCK_CRACKING = "block_cracking"
    DIAGONAL_CRACKING = "diagonal_cracking"
    ALLIGATOR_CRACKING = "alligator_cracking"

    @property
    def display(self) -> str:
        """Name as it appears in caption text."""
        return _DISPLAY_NAMES[self]


_DISPLAY_NAMES = {
    DistressType.LONGITUDINAL_CRACKING: "longitudinal cracking",
    DistressType.TRANSVERSE_CRACKING: "transverse cracking",
    DistressType.POTHOLE: "potholes",
    DistressType.PATCHING: "patching",
    DistressType.BLOCK_CRACKING: "block cracking",
    DistressType.DIAGONAL_CRACKING: "diagonal cracking",
    DistressType.ALLIGATOR_CRACKING: "alligator cracking",
}

# Token sequences accepted for each distress, longest first within a type.
_DISTRESS_PHRASES: list[tuple[tuple[str, ...], DistressType]] = sorted(
    [
        (("longitudinal", "cracking"), DistressType.LONGITUDINAL_CRACKING),
        (("transverse", "cracking"), DistressType.TRANSVERSE_CRACKING),
        (("potholes",), DistressType.POTHOLE),
        (("pothole",), DistressType.POTHOLE),
        (("patching",), DistressType.PATCHING),
        (("block", "cracking"), DistressType.BLOCK_CRACKING),
        (("diagonal", "cracking"), DistressType.DIAGONAL_CRACKING),
        (("alligator", "cracking"), DistressType.ALLIGATOR_CRACKING),
    ],
    key=lambda item: -len(item[0]),
)


class Severity(str, enum.Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return _SEVERITY_RANK[self]

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank < other.rank

    def __le__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank <= other.rank

    def __gt__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank > other.rank

    def __ge__(self, other: object) -> bool:
        if not isinstance(other, Severity):
            return NotImplemented
        return self.rank >= other.rank


_SEVERITY_RANK = {Severity.LOW: 0, Severity.MEDIUM: 1, Severity.HIGH: 2}


class PciClass(enum.Enum):
    """ASTM condition classes. Values are (lo, hi) bounds of [lo, hi)."""

    FAILED = (0.0, 10.0)
    SERIOUS = (10.0, 25.0)
    VERY_POOR = (25.0, 40.0)
    POOR = (40.0, 55.0)
    FAIR = (55.0, 70.0)
    SATISFACTORY = (70.0, 85.0)
    GOOD = (85.0, 100.0)

    @property
    def lo(self) -> float:
        return self.value[0]

    @property
    def hi(self) -> float:
        return self.value[1]

    @property
    def label(self) -> str:
        """Lowercase name with spaces, e.g. ``very poor``."""
        return self.name.lower().replace("_", " ")

    def contains(self, pci: float) -> bool:
        if self is PciClass.GOOD:
            return self.lo <= pci <= self.hi
        return self.lo <= pci < self.hi


def pci_class(pci: float) -> PciClass:
    """Bucket a PCI value into its condition class.

    Ranges are half-open ``[lo, hi)`` except ``good`` which includes 100.
    """
    pci = float(pci)
    if not (0.0 <= pci <= 100.0) or math.isnan(pci):
        raise ValueError(f"pci out of range [0, 100]: {pci}")
    for cls in PciClass:
        if cls.contains(pci):
            return cls
    raise AssertionError("unreachable: classes partition [0, 100]")


@dataclass(frozen=True, slots=True)
class BoundingBox:
    """Axis-aligned box in pixels, stored as center and size."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("cx", "cy", "w", "h"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"box {name} must be finite")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box size must be positive, got w={self.w}, h={self.h}")

    @property
    def x0(self) -> float:
        return self.cx - self.w / 2

    @property
    def x1(self) -> float:
        return self.cx + self.w / 2

    @property
    def y0(self) -> float:
        return self.cy - self.h / 2

    @property
    def y1(self) -> float:
        return self.cy + self.h / 2

    def intersects_image(self, width: float, height: float) -> bool:
        return self.x0 < width and self.x1 > 0 and self.y0 < height and self.y1 > 0

    def clamped(self, width: float, height: float) -> "BoundingBox":
        """Box clipped to the image rectangle. Caller ensures they intersect."""
        x0, x1 = max(self.x0, 0.0), min(self.x1, float(width))
        y0, y1 = max(self.y0, 0.0), min(self.y1, float(height))
        return BoundingBox((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


@dataclass(frozen=True, slots=True)
class DistressInstance:
    distress: DistressType
    severity: Severity
    box: BoundingBox


@dataclass(frozen=True, slots=True)
class StructuredCaption:
    """Present (severity, distress) pairs, absent distresses and an optional PCI."""

    present: tuple[tuple[Severity, DistressType], ...] = ()
    absent: tuple[DistressType, ...] = ()
    pci: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "present", tuple((Severity(s), DistressType(d)) for s, d in self.present))
        object.__setattr__(self, "absent", tuple(DistressType(d) for d in self.absent))
        if len(set(self.present)) != len(self.present):
            raise ValueError("duplicate (severity, distress) pair in present list")
        if len(set(self.absent)) != len(self.absent):
            raise ValueError("duplicate distress in absent list")
        overlap = {d for _, d in self.present} & set(self.absent)
        if overlap:
            names = ", ".join(sorted(d.value for d in overlap))
            raise ValueError(f"distress listed as both present and absent: {names}")
        if self.pci is not None:
            pci = float(self.pci)
            if not (0.0 <= pci <= 100.0):
                raise ValueError(f"pci out of range [0, 100]: {pci}")
            object.__setattr__(self, "pci", pci)

    @classmethod
    def from_instances(cls, instances: Iterable[DistressInstance], pci: float | None = None) -> "StructuredCaption":
        """Caption implied by a set of boxes; absent lists the unseen types in enum order."""
        present: list[tuple[Severity, DistressType]] = []
        for inst in instances:
            pair = (inst.severity, inst.distress)
            if pair not in present:
                present.append(pair)
        seen = {d for _, d in present}
        absent = tuple(d for d in DistressType if d not in seen)
        return cls(tuple(present), absent, pci)


@dataclass(frozen=True, slots=True)
class AnnotationRecord:
    image_id: str
    width: int
    height: int
    pci: float
    instances: tuple[DistressInstance, ...] = ()
    caption: StructuredCaption = field(default_factory=StructuredCaption)

    def to_json(self, caption_text: str | None = None) -> str:
        """Serialize back to one JSON Lines row."""
        row: dict[str, Any] = {
            "image_id": self.image_id,
            "width": self.width,
            "height": self.height,
            "pci": self.pci,
            "instances": [
                {
                    "distress": inst.distress.value,
                    "severity": inst.severity.value,
                    "cx": inst.box.cx,
                    "cy": inst.box.cy,
                    "w": inst.box.w,
                    "h": inst.box.h,
                }
                for inst in self.instances
            ],
            "caption": caption_text if caption_text is not None else render_caption(self.caption),
        }
        return json.dumps(row, sort_keys=False)


# ---------------------------------------------------------------------------
# Caption grammar
# ---------------------------------------------------------------------------

PRESENT_PREFIXES: dict[str, str] = {
    "canonical": "The image shows",
    "demonstrates": "This image demonstrates",
    "highlights": "This image highlights",
    "outlines": "This image outlines",
}

ABSENT_INTROS: dict[str, str] = {
    "canonical": "Distresses absent :",
    "does_not_contain": "This image does not contain any form of :",
    "following": "The following distresses are absent :",
}

NO_DISTRESS_CLAUSE = "No distresses observed ."


@dataclass(frozen=True, slots=True)
class CaptionStyle:
    present_prefix: str = PRESENT_PREFIXES["canonical"]
    absent_intro: str = ABSENT_INTROS["canonical"]
    or_before_last: bool = True


STYLES: dict[str, CaptionStyle] = {
    "canonical": CaptionStyle(),
    "demonstrates": CaptionStyle(PRESENT_PREFIXES["demonstrates"]),
    "highlights": CaptionStyle(PRESENT_PREFIXES["highlights"], ABSENT_INTROS["does_not_contain"]),
    "outlines": CaptionStyle(PRESENT_PREFIXES["outlines"], ABSENT_INTROS["following"], or_before_last=False),
}


def _format_number(value: float) -> str:
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def pci_sentence(pci: float, with_class: bool = True) -> str:
    text = f"The PCI of the pavement is {_format_number(pci)}"
    if with_class:
        text += f" ( {pci_class(pci).label} )"
    return text + " ."


def render_caption(caption: StructuredCaption, style: str | CaptionStyle = "canonical") -> str:
    """Render a structured caption as space-tokenized text."""
    if isinstance(style, str):
        try:
            style = STYLES[style]
        except KeyError:
            raise ValueError(f"unknown caption style {style!r}; expected one of {sorted(STYLES)}") from None
    parts: list[str] = []
    if caption.present:
        items = " , ".join(f"{sev.value} severity {dist.display}" for sev, dist in caption.present)
        parts.append(f"{style.present_prefix} {items} .")
    else:
        parts.append(NO_DISTRESS_CLAUSE)
    if caption.absent:
        names = [d.display for d in caption.absent]
        if style.or_before_last and len(names) > 1:
            listed = " , ".join(names[:-1]) + " or " + names[-1]
        else:
            listed = " , ".join(names)
        parts.append(f"{style.absent_intro} {listed} .")
    if caption.pci is not None:
        parts.append(pci_sentence(caption.pci))
    return " ".join(parts)


class CaptionParseError(ValueError):
    """Caption text does not follow any known template.

    ``offset`` is the UTF-8 byte offset of the offending token (or the end of
    the text when input ran out).
    """

    def __init__(self, message: str, offset: int, token: str | None = None):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
        self.token = token


_TOKEN_RE = re.compile(r"[^\s,.:()]+|[,.:()]")
_FRACTION_RE = re.compile(r"\d+(e[-+]?\d+)?")


def _split(phrase: str) -> tuple[str, ...]:
    return tuple(m.group(0).lower() for m in _TOKEN_RE.finditer(phrase))


_PRESENT_PREFIX_TOKENS = sorted({_split(p) for p in PRESENT_PREFIXES.values()}, key=len, reverse=True)
_ABSENT_INTRO_TOKENS = sorted({_split(p) for p in ABSENT_INTROS.values()}, key=len, reverse=True)
_NO_DISTRESS_TOKENS = _split(NO_DISTRESS_CLAUSE)[:-1]
_PCI_PREFIX_TOKENS = _split("The PCI of the pavement is")


class _Cursor:
    def __init__(self, text: str):
        self.text = text
        matches = list(_TOKEN_RE.finditer(text))
        self.tokens = [m.group(0).lower() for m in matches]
        self.raw = [m.group(0) for m in matches]
        self.starts = [m.start() for m in matches]
        self.pos = 0

    def byte_offset(self, index: int | None = None) -> int:
        index = self.pos if index is None else index
        char = self.starts[index] if index < len(self.starts) else len(self.text)
        return len(self.text[:char].encode("utf-8"))

    def done(self) -> bool:
        return self.pos >= len(self.tokens)

    def peek(self) -> str | None:
        return None if self.done() else self.tokens[self.pos]

    def looking_at(self, seq: tuple[str, ...]) -> bool:
        return tuple(self.tokens[self.pos : self.pos + len(seq)]) == seq

    def fail(self, message: str) -> CaptionParseError:
        token = None if self.done() else self.raw[self.pos]
        if token is not None:
            message = f"{message}, got {token!r}"
        else:
            message = f"{message}, got end of text"
        return CaptionParseError(message, self.byte_offset(), token)

    def expect(self, tok: str) -> None:
        if self.peek() != tok:
            raise self.fail(f"expected {tok!r}")
        self.pos += 1

    def distress(self) -> DistressType:
        for phrase, dist in _DISTRESS_PHRASES:
            if self.looking_at(phrase):
                self.pos += len(phrase)
                return dist
        raise self.fail("unknown distress name")

    def severity(self) -> Severity:
        tok = self.peek()
        try:
            sev = Severity(tok)
        except ValueError:
            raise self.fail("unknown severity word") from None
        self.pos += 1
        return sev


def parse_caption(text: str) -> StructuredCaption:
    """Parse caption text back into a :class:`StructuredCaption`.

    Accepts the four present-clause prefixes, the three absent-clause intros,
    absent lists with or without ``or`` before the last item, and an optional
    trailing PCI sentence.
    """
    cur = _Cursor(text)
    present: list[tuple[Severity, DistressType]] = []
    absent: list[DistressType] = []
    pci: float | None = None

    if cur.looking_at(_NO_DISTRESS_TOKENS):
        cur.pos += len(_NO_DISTRESS_TOKENS)
        cur.expect(".")
    else:
        for prefix in _PRESENT_PREFIX_TOKENS:
            if cur.looking_at(prefix):
                cur.pos += len(prefix)
                break
        else:
            raise cur.fail("unrecognized caption template: expected a present-distress clause")
        while True:
            sev = cur.severity()
            cur.expect("severity")
            present.append((sev, cur.distress()))
            if cur.peek() in (",", "and"):
                cur.pos += 1
                continue
            cur.expect(".")
            break

    for intro in _ABSENT_INTRO_TOKENS:
        if cur.looking_at(intro):
            cur.pos += len(intro)
            while True:
                absent.append(cur.distress())
                if cur.peek() in (",", "or", "and"):
                    cur.pos += 1
                    continue
                cur.expect(".")
                break
            break

    if cur.looking_at(_PCI_PREFIX_TOKENS):
        cur.pos += len(_PCI_PREFIX_TOKENS)
        tok = cur.peek()
        try:
            pci = float(tok) if tok is not None else None
        except ValueError:
            pci = None
        if pci is None:
            raise cur.fail("expected a PCI number")
        # numbers such as 39.5 were split on '.', so rejoin greedily
        cur.pos += 1
        if (
            cur.peek() == "."
            and cur.pos + 1 < len(cur.tokens)
            and _FRACTION_RE.fullmatch(cur.tokens[cur.pos + 1])
        ):
            pci = float(f"{tok}.{cur.tokens[cur.pos + 1]}")
            cur.pos += 2
        if cur.peek() == "(":
            cur.pos += 1
            start = cur.pos
            while cur.peek() not in (")", None):
                cur.pos += 1
            label = " ".join(cur.tokens[start : cur.pos])
            if not 0.0 <= pci <= 100.0 or label != pci_class(pci).label:
                cur.pos = start
                raise cur.fail(f"class name does not match PCI {_format_number(pci)}")
            cur.expect(")")
        cur.expect(".")

    if not cur.done():
        raise cur.fail("unexpected trailing text")
    try:
        return StructuredCaption(tuple(present), tuple(absent), pci)
    except ValueError as exc:
        raise CaptionParseError(str(exc), len(text.encode("utf-8"))) from None


# ---------------------------------------------------------------------------
# JSON Lines annotation files
# ---------------------------------------------------------------------------


class AnnotationError(ValueError):
    """Base class for annotation file problems."""


class MalformedJSONError(AnnotationError):
    pass


class MissingFieldError(AnnotationError):
    pass


class AnnotationValidationError(AnnotationError):
    pass


_REQUIRED = ("image_id", "width", "height", "pci", "instances")
_INSTANCE_REQUIRED = ("distress", "severity", "cx", "cy", "w", "h")


def _number(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise AnnotationValidationError(f"{what} must be a number, got {value!r}")
    if not math.isfinite(value):
        raise AnnotationValidationError(f"{what} must be finite")
    return float(value)


def parse_annotation_line(line: str) -> AnnotationRecord:
    """Parse and validate one JSON Lines annotation row."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MalformedJSONError(f"malformed JSON: {exc.msg} at column {exc.colno}") from None
    if not isinstance(obj, dict):
        raise MalformedJSONError("annotation row must be a JSON object")
    for key in _REQUIRED:
        if key not in obj:
            raise MissingFieldError(f"missing field {key!r}")

    image_id = obj["image_id"]
    if not isinstance(image_id, str) or not image_id:
        raise AnnotationValidationError("image_id must be a non-empty string")
    width, height = obj["width"], obj["height"]
    for name, value in (("width", width), ("height", height)):
        if isinstance(value, bool) or not isinstance(value, int) or value <= 0:
            raise AnnotationValidationError(f"{name} must be a positive integer, got {value!r}")
    pci = _number(obj["pci"], "pci")
    if not (0.0 <= pci <= 100.0):
        raise AnnotationValidationError(f"pci out of range [0, 100]: {pci:g}")

    raw_instances = obj["instances"]
    if not isinstance(raw_instances, list):
        raise AnnotationValidationError("instances must be an array")
    instances: list[DistressInstance] = []
    for i, raw in enumerate(raw_instances):
        if not isinstance(raw, dict):
            raise AnnotationValidationError(f"instance {i}: must be an object")
        for key in _INSTANCE_REQUIRED:
            if key not in raw:
                raise MissingFieldError(f"instance {i}: missing field {key!r}")
        try:
            distress = DistressType(raw["distress"])
        except ValueError:
            raise AnnotationValidationError(f"instance {i}: unknown distress {raw['distress']!r}") from None
        try:
            severity = Severity(raw["severity"])
        except ValueError:
            raise AnnotationValidationError(f"instance {i}: unknown severity {raw['severity']!r}") from None
        try:
            box = BoundingBox(*(_number(raw[k], f"instance {i}: {k}") for k in ("cx", "cy", "w", "h")))
        except AnnotationValidationError:
            raise
        except ValueError as exc:
            raise AnnotationValidationError(f"instance {i}: {exc}") from None
        if not box.intersects_image(width, height):
            raise AnnotationValidationError(f"instance {i}: box lies outside the {width}x{height} image")
        instances.append(DistressInstance(distress, severity, box))

    derived = StructuredCaption.from_instances(instances)
    caption_text = obj.get("caption")
    if caption_text is None:
        caption = derived
    else:
        if not isinstance(caption_text, str):
            raise AnnotationValidationError("caption must be a string")
        try:
            caption = parse_caption(caption_text)
        except CaptionParseError as exc:
            raise AnnotationValidationError(f"caption: {exc}") from None
        if set(caption.present) != set(derived.present):
            raise AnnotationValidationError(
                "caption present distresses do not match the annotated instances"
            )
        if caption.pci is not None and caption.pci != pci:
            raise AnnotationValidationError(f"caption PCI {caption.pci:g} differs from record pci {pci:g}")

    return AnnotationRecord(image_id, width, height, pci, tuple(instances), caption)


def iter_annotation_file(path) -> Iterator[tuple[int, AnnotationRecord]]:
    """Yield ``(line_number, record)``; errors carry the 1-based line number."""
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, parse_annotation_line(line)
            except AnnotationError as exc:
                raise type(exc)(f"line {lineno}: {exc}") from None


def load_annotations(path) -> list[AnnotationRecord]:
    return [rec for _, rec in iter_annotation_file(path)]
