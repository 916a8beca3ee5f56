"""Image-text corpus construction: ingest, YFCC caption filtering, dedupe, stats.

Source manifest (JSON)::

    {
      "version": 1,
      "sources": [
        {"name": "yfcc100m", "path": "yfcc.jsonl"},
        {"name": "coco", "path": "coco.jsonl", "image_root": "images/"}
      ]
    }

Each source file is line-delimited JSON with keys ``image`` (a path or a
content hash), optional ``description``, ``title``, ``caption`` and
``language``. Sources whose name starts with ``yfcc`` go through
``yfcc_filter``; all others pass through unfiltered. Relative paths are
resolved against the manifest's directory. When ``image_root`` is given and
``image`` names an existing file under it, the image is identified by the
sha256 of its bytes.

Output directory: ``pairs-00000.jsonl``, ... shards of ``{"image", "text",
"source", "offset"}`` records plus ``manifest.json`` holding the shard list,
rejection counts and ``CorpusStats``.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

MANIFEST_VERSION = 1

ENGLISH_STOPWORDS = frozenset(
    "a an the of on in at to and or with for from by is are was were be this that these those it its "
    "my our your his her their over under near into up down out some two three".split()
)
# common function words of languages that also write mostly in ASCII
FOREIGN_STOPWORDS = frozenset(
    "el la los las un una y en con del por para es que le les une et des du dans avec est der die das "
    "und ein eine mit ist auf il lo di che per della het een van zijn och att som och dem nicht sur".split()
)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    image: str
    description: str | None = None
    title: str | None = None
    caption: str | None = None
    source: str = ""
    language: str | None = None

    def __post_init__(self):
        if not any(_present(t) for t in (self.description, self.title, self.caption)):
            raise CorpusError(f"record for image {self.image!r} has no description, title or caption")


@dataclass(frozen=True)
class CorpusPair:
    image: str
    text: str
    source: str = ""
    offset: int = 0


@dataclass(frozen=True)
class FilterResult:
    text: str | None
    field: str | None
    reason: str | None = None

    @property
    def accepted(self) -> bool:
        return self.text is not None


@dataclass
class CorpusStats:
    pairs: int
    unique_images: int
    mean_words: float
    per_source: dict[str, int] = field(default_factory=dict)


def _present(text: str | None) -> bool:
    return text is not None and text.strip() != ""


def word_count(text: str) -> int:
    return len(text.split())


def heuristic_is_english(text: str) -> bool:
    """ASCII share of letters at least 0.9 and no more foreign than English function words."""
    letters = [c for c in text if c.isalpha()]
    if not letters:
        return False
    if sum(c.isascii() for c in letters) / len(letters) < 0.9:
        return False
    words = re.findall(r"[a-z']+", text.lower())
    english = sum(w in ENGLISH_STOPWORDS for w in words)
    foreign = sum(w in FOREIGN_STOPWORDS for w in words)
    return english >= foreign


LanguageDetector = Callable[[str], bool]


def is_english(text: str, language: str | None = None, detector: LanguageDetector = heuristic_is_english) -> bool:
    """A language tag, when present, is trusted over the detector."""
    if language:
        return language.lower().split("-")[0].split("_")[0] in ("en", "eng", "english")
    return detector(text)


def _check(text: str | None, language: str | None, detector: LanguageDetector) -> str | None:
    if not _present(text):
        return "missing"
    if not is_english(text, language, detector):
        return "language"
    if word_count(text) < 3:
        return "too_short"
    return None


def yfcc_filter(record: PairRecord, detector: LanguageDetector = heuristic_is_english) -> FilterResult:
    """Description if it is English with at least three words, else the title under the same test.

    A rejection carries the reason the title failed, or the description's
    reason when there is no title.
    """
    reason = _check(record.description, record.language, detector)
    if reason is None:
        return FilterResult(record.description.strip(), "description")
    title_reason = _check(record.title, record.language, detector)
    if title_reason is None:
        return FilterResult(record.title.strip(), "title")
    return FilterResult(None, None, reason if title_reason == "missing" else title_reason)


def is_yfcc(source: str) -> bool:
    return source.lower().startswith("yfcc")


def select_text(record: PairRecord, detector: LanguageDetector = heuristic_is_english) -> FilterResult:
    """YFCC records are filtered; other sources keep caption, else description, else title."""
    if is_yfcc(record.source):
        return yfcc_filter(record, detector)
    for name in ("caption", "description", "title"):
        text = getattr(record, name)
        if _present(text):
            return FilterResult(text.strip(), name)
    return FilterResult(None, None, "missing")


def dedupe(pairs: Iterable, key: Callable = lambda p: (p.image, p.text)) -> list:
    """Drop repeated (image, text) pairs, keeping first occurrences in order."""
    seen = set()
    out = []
    for p in pairs:
        k = key(p)
        if k not in seen:
            seen.add(k)
            out.append(p)
    return out


def corpus_stats(pairs: Sequence[CorpusPair]) -> CorpusStats:
    if not pairs:
        return CorpusStats(0, 0, 0.0, {})
    words = sum(word_count(p.text) for p in pairs)
    return CorpusStats(
        pairs=len(pairs),
        unique_images=len({p.image for p in pairs}),
        mean_words=words / len(pairs),
        per_source=dict(Counter(p.source for p in pairs)),
    )


# ---------------------------------------------------------------------------
# building from a manifest


def _image_id(ref: str, root: Path | None) -> str:
    if root is not None:
        path = root / ref
        if path.is_file():
            return "sha256:" + hashlib.sha256(path.read_bytes()).hexdigest()
    return ref


def read_sources(manifest_path: str | Path) -> list[tuple[str, Path, Path | None]]:
    path = Path(manifest_path)
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise CorpusError(f"missing source manifest {path}") from None
    except json.JSONDecodeError as e:
        raise CorpusError(f"source manifest {path} is not valid JSON: {e.msg}") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorpusError(f"source manifest version must be {MANIFEST_VERSION}")
    out = []
    for entry in manifest.get("sources", []):
        unknown = set(entry) - {"name", "path", "image_root"}
        if unknown or "name" not in entry or "path" not in entry:
            raise CorpusError(f"bad source entry {entry}")
        root = path.parent / entry["image_root"] if "image_root" in entry else None
        out.append((entry["name"], path.parent / entry["path"], root))
    return out


def ingest(name: str, path: Path, root: Path | None = None) -> Iterable[tuple[int, PairRecord]]:
    if not path.exists():
        raise CorpusError(f"missing source file {path}")
    with open(path) as handle:
        for offset, line in enumerate(handle):
            if not line.strip():
                continue
            raw = json.loads(line)
            yield offset, PairRecord(
                image=_image_id(str(raw["image"]), root),
                description=raw.get("description"),
                title=raw.get("title"),
                caption=raw.get("caption"),
                source=name,
                language=raw.get("language"),
            )


@dataclass
class BuildResult:
    pairs: list[CorpusPair]
    stats: CorpusStats
    rejected: dict[str, int]
    shards: list[Path]


def build_corpus(
    manifest_path: str | Path,
    out_dir: str | Path,
    shard_size: int = 10_000,
    detector: LanguageDetector = heuristic_is_english,
) -> BuildResult:
    """Filter every source in manifest order, dedupe, and write sharded output."""
    if shard_size < 1:
        raise CorpusError("shard_size must be positive")
    pairs, rejected = [], Counter()
    for name, path, root in read_sources(manifest_path):
        for offset, record in ingest(name, path, root):
            result = select_text(record, detector)
            if result.accepted:
                pairs.append(CorpusPair(record.image, result.text, name, offset))
            else:
                rejected[result.reason] += 1
    before = len(pairs)
    pairs = dedupe(pairs)
    if before > len(pairs):
        rejected["duplicate"] = before - len(pairs)
    stats = corpus_stats(pairs)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    shards = []
    for i, start in enumerate(range(0, len(pairs), shard_size)):
        shard = out / f"pairs-{i:05d}.jsonl"
        with open(shard, "w") as handle:
            for p in pairs[start : start + shard_size]:
                handle.write(json.dumps(asdict(p), sort_keys=True) + "\n")
        shards.append(shard)
    manifest = {
        "version": MANIFEST_VERSION,
        "shards": [s.name for s in shards],
        "rejected": dict(sorted(rejected.items())),
        "stats": asdict(stats),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return BuildResult(pairs, stats, dict(rejected), shards)


def load_corpus(out_dir: str | Path) -> list[CorpusPair]:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    pairs = []
    for name in manifest["shards"]:
        with open(out / name) as handle:
            pairs.extend(CorpusPair(**json.loads(line)) for line in handle)
    return pairs
