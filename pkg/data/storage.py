"""On-disk corpus layout.

    <dir>/corpus.json          CorpusConfig and LocaleSpecs
    <dir>/manifest.jsonl       one ManifestRecord per utterance, sorted by id
    <dir>/features/<id>.kwsf   magic "KWSF" | u32 version | u32 T | u32 F | f32 data | u32 CRC32
    <dir>/labels/<id>.kwsl     magic "KWSL" | u32 T | u8 encoder ids | u8 targets | u32 CRC32

Integers and floats are little-endian; each CRC32 covers every byte before it.
"""

import json
import logging
import struct
import zlib
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from data.config import CorpusConfig, LocaleSpec
from data.corpus import Corpus, FrameLabels, Split, Utterance
from numerics.errors import KwsError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"KWSF"
LABEL_MAGIC = b"KWSL"
FEATURE_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
CORPUS_NAME = "corpus.json"
FEATURE_DIR = "features"
LABEL_DIR = "labels"


class CorpusFormatError(KwsError):
    def __init__(self, source: str, offset: int, reason: str):
        super().__init__(f"{source}: {reason} at byte offset {offset}")
        self.source = source
        self.offset = offset


class ManifestRecord(BaseModel):
    id: str
    locale: str
    split: Split
    positive: bool
    snr_db: float | None
    feature_path: str
    label_path: str
    keyword_span: tuple[int, int] | None = None


class CorpusHeader(BaseModel):
    config: CorpusConfig
    locales: list[LocaleSpec]


def _seal(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body))


def _unseal(data: bytes, magic: bytes, source: str) -> bytes:
    if len(data) < len(magic) + 4:
        raise CorpusFormatError(source, len(data), "truncated file")
    if data[: len(magic)] != magic:
        raise CorpusFormatError(source, 0, f"bad magic {data[:len(magic)]!r}")
    (stored,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored:
        raise CorpusFormatError(source, len(data) - 4, "CRC32 mismatch")
    return data[:-4]


def encode_features(features: np.ndarray) -> bytes:
    frames, dims = features.shape
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, frames, dims)
    return _seal(header + np.ascontiguousarray(features, dtype="<f4").tobytes())


def decode_features(data: bytes, source: str = "<memory>") -> np.ndarray:
    body = _unseal(data, FEATURE_MAGIC, source)
    if len(body) < 16:
        raise CorpusFormatError(source, len(body), "truncated header")
    version, frames, dims = struct.unpack_from("<III", body, 4)
    if version != FEATURE_VERSION:
        raise CorpusFormatError(source, 4, f"unsupported version {version}")
    expected = 16 + 4 * frames * dims
    if len(body) != expected:
        raise CorpusFormatError(
            source, len(body), f"payload holds {len(body)} bytes, header implies {expected}"
        )
    return np.frombuffer(body, dtype="<f4", offset=16).reshape(frames, dims).astype(np.float32)


def encode_labels(labels: FrameLabels) -> bytes:
    header = LABEL_MAGIC + struct.pack("<I", len(labels))
    return _seal(header + labels.encoder.tobytes() + labels.decoder.tobytes())


def decode_labels(
    data: bytes, source: str = "<memory>", keyword_span: tuple[int, int] | None = None
) -> FrameLabels:
    body = _unseal(data, LABEL_MAGIC, source)
    if len(body) < 8:
        raise CorpusFormatError(source, len(body), "truncated header")
    (frames,) = struct.unpack_from("<I", body, 4)
    if len(body) != 8 + 2 * frames:
        raise CorpusFormatError(
            source, len(body), f"payload holds {len(body) - 8} bytes, header implies {2 * frames}"
        )
    encoder = np.frombuffer(body, dtype=np.uint8, count=frames, offset=8)
    decoder = np.frombuffer(body, dtype=np.uint8, count=frames, offset=8 + frames)
    return FrameLabels(encoder=encoder.copy(), decoder=decoder.copy(), keyword_span=keyword_span)


def write_features(path: Path | str, features: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(features))


def read_features(path: Path | str) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), source=str(path))


def write_corpus(corpus: Corpus, directory: Path | str) -> Path:
    directory = Path(directory)
    (directory / FEATURE_DIR).mkdir(parents=True, exist_ok=True)
    (directory / LABEL_DIR).mkdir(parents=True, exist_ok=True)

    header = CorpusHeader(config=corpus.config, locales=corpus.locales)
    (directory / CORPUS_NAME).write_text(
        json.dumps(header.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"
    )
    lines = []
    for utt in sorted(corpus.utterances, key=lambda u: u.id):
        record = ManifestRecord(
            id=utt.id,
            locale=corpus.locales[utt.locale].name,
            split=utt.split,
            positive=utt.is_positive,
            snr_db=utt.snr_db,
            feature_path=f"{FEATURE_DIR}/{utt.id}.kwsf",
            label_path=f"{LABEL_DIR}/{utt.id}.kwsl",
            keyword_span=utt.labels.keyword_span,
        )
        write_features(directory / record.feature_path, utt.features)
        (directory / record.label_path).write_bytes(encode_labels(utt.labels))
        lines.append(record.model_dump_json())
    (directory / MANIFEST_NAME).write_text("".join(line + "\n" for line in lines))
    logger.info("wrote %d utterances to %s", len(lines), directory)
    return directory


def read_manifest(directory: Path | str) -> list[ManifestRecord]:
    path = Path(directory) / MANIFEST_NAME
    records = []
    offset = 0
    with open(path, "rb") as handle:
        for raw in handle:
            try:
                records.append(ManifestRecord.model_validate_json(raw))
            except ValidationError as exc:
                raise CorpusFormatError(str(path), offset, f"bad manifest line: {exc}") from exc
            offset += len(raw)
    return records


def read_corpus(directory: Path | str) -> Corpus:
    directory = Path(directory)
    header_path = directory / CORPUS_NAME
    try:
        header = CorpusHeader.model_validate_json(header_path.read_bytes())
    except ValidationError as exc:
        raise CorpusFormatError(str(header_path), 0, f"bad corpus header: {exc}") from exc
    names = [spec.name for spec in header.locales]

    utterances = []
    for record in read_manifest(directory):
        if record.locale not in names:
            raise CorpusFormatError(
                str(directory / MANIFEST_NAME), 0, f"{record.id}: unknown locale {record.locale}"
            )
        label_path = directory / record.label_path
        utterances.append(
            Utterance(
                id=record.id,
                locale=names.index(record.locale),
                features=read_features(directory / record.feature_path),
                labels=decode_labels(
                    label_path.read_bytes(), str(label_path), record.keyword_span
                ),
                is_positive=record.positive,
                split=record.split,
                snr_db=record.snr_db,
            )
        )
    logger.info("read %d utterances from %s", len(utterances), directory)
    return Corpus(config=header.config, locales=header.locales, utterances=utterances)
