"""Synthetic overlapped-stream task generation and dataset files.

Each content token owns a fixed random unit-norm template vector; an
utterance renders each token as one to three consecutive template frames.
Speaker streams are added into a zero canvas at their start offsets
(optionally plus Gaussian noise), so mixtures overlap in feature space the
way overlapped speech embeddings do. Every accepted sample is CTC-feasible
for both per-speaker targets and the full serialized target, and mixtures
always share at least one overlapped frame.

On disk a dataset is one manifest (flat key = value text) plus per-split
binary feature files in the checkpoint tensor encoding and label files of
whitespace-joined tokens with the literal <sc> separator, one sample per
line.
"""

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import labels as lab

SPLITS = ("train", "dev", "eval")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    n_tokens: int = 12
    feature_dim: int = 16
    min_token_frames: int = 1
    max_token_frames: int = 3
    speakers: int = 2
    min_offset: int = 0
    max_offset: int = 6
    noise_std: float = 0.0
    min_tokens: int = 3
    max_tokens: int = 6
    train_count: int = 2000
    dev_count: int = 200
    eval_count: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_tokens < 2:
            raise DatasetError("need at least two content tokens")
        if self.speakers < 1:
            raise DatasetError("need at least one speaker")
        if not (1 <= self.min_token_frames <= self.max_token_frames):
            raise DatasetError("bad frames-per-token range")
        if not (1 <= self.min_tokens <= self.max_tokens):
            raise DatasetError("bad utterance token-length range")
        if not (0 <= self.min_offset <= self.max_offset):
            raise DatasetError("bad offset range")
        if self.noise_std < 0:
            raise DatasetError("noise std must be non-negative")

    @property
    def content_tokens(self):
        if self.n_tokens <= 26:
            return tuple(chr(ord("a") + i) for i in range(self.n_tokens))
        return tuple(f"t{i:02d}" for i in range(self.n_tokens))

    @property
    def split_counts(self):
        return {"train": self.train_count, "dev": self.dev_count,
                "eval": self.eval_count}

    def templates(self):
        """Unit-norm template vector per content token, pairwise separated
        by more than 0.1; deterministic in the spec seed."""
        rng = np.random.default_rng([self.seed, 0x7E3F])
        for _ in range(100):
            t = rng.normal(size=(self.n_tokens, self.feature_dim))
            t /= np.linalg.norm(t, axis=1, keepdims=True)
            dists = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=2)
            np.fill_diagonal(dists, np.inf)
            if dists.min() > 0.1:
                return t
        raise DatasetError(
            "could not draw separated templates; raise feature_dim")

    def vocab(self):
        return lab.build_vocab(self.content_tokens)


@dataclass
class MixtureSample:
    """Overlapped feature matrix plus its serialized transcript. The
    per-speaker (offset, tokens) pairs exist only at generation time;
    reloaded samples carry the serialized label alone."""

    features: np.ndarray
    label_tokens: list
    speakers: list = field(default=None)

    @property
    def streams(self):
        return lab.split_on_sc(self.label_tokens)


def _serialized_min_frames(streams):
    total = 0
    for s in streams:
        total += len(s)
        total += sum(1 for a, b in zip(s, s[1:]) if a == b)
    return total + max(len(streams) - 1, 0)


def synth_mixture(spec, rng, templates=None):
    """One sample; retries draws until the layout is feasible.

    Feasible means: serialized CTC target fits the frame count, and for
    multi-speaker specs at least one frame is covered by two speakers.
    """
    if templates is None:
        templates = spec.templates()
    tokens_pool = spec.content_tokens
    for _ in range(200):
        speakers = []
        for s in range(spec.speakers):
            n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            toks = [tokens_pool[int(rng.integers(spec.n_tokens))] for _ in range(n)]
            if spec.max_token_frames < 2:
                # no room for a separating blank: forbid adjacent repeats
                for i in range(1, n):
                    while toks[i] == toks[i - 1]:
                        toks[i] = tokens_pool[int(rng.integers(spec.n_tokens))]
            durations = []
            for i in range(n):
                d = int(rng.integers(spec.min_token_frames,
                                     spec.max_token_frames + 1))
                if i and toks[i] == toks[i - 1]:
                    d = max(d, 2)  # leaves a frame for the separating blank
                durations.append(d)
            offset = 0 if s == 0 else int(
                rng.integers(spec.min_offset, spec.max_offset + 1))
            speakers.append((offset, toks, durations))

        lengths = [sum(d) for _, _, d in speakers]
        T = max(off + ln for (off, _, _), ln in zip(speakers, lengths))
        coverage = np.zeros(T, dtype=np.int64)
        for (off, _, _), ln in zip(speakers, lengths):
            coverage[off:off + ln] += 1
        if spec.speakers > 1 and coverage.max() < 2:
            continue
        if T < _serialized_min_frames([toks for _, toks, _ in speakers]):
            continue

        canvas = np.zeros((T, spec.feature_dim))
        tok_index = {t: i for i, t in enumerate(tokens_pool)}
        for off, toks, durations in speakers:
            pos = off
            for tok, d in zip(toks, durations):
                canvas[pos:pos + d] += templates[tok_index[tok]]
                pos += d
        if spec.noise_std > 0:
            canvas += rng.normal(0.0, spec.noise_std, size=canvas.shape)
        label = lab.serialize([(off, toks) for off, toks, _ in speakers])
        return MixtureSample(features=canvas, label_tokens=label.tokens,
                             speakers=[(off, toks) for off, toks, _ in speakers])
    raise DatasetError("could not draw a feasible mixture; widen the offsets "
                       "or shorten the utterances")


# ---------------------------------------------------------------------------
# on-disk format


def _spec_lines(spec):
    return [f"{f.name} = {getattr(spec, f.name)}" for f in fields(TaskSpec)]


def _parse_kv(lines):
    kv = {}
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DatasetError(f"manifest line not key = value: {raw!r}")
        kv[key.strip()] = value.strip()
    return kv


def spec_from_kv(kv):
    kwargs = {}
    for f in fields(TaskSpec):
        if f.name not in kv:
            raise DatasetError(f"manifest missing spec key {f.name!r}")
        raw = kv[f.name]
        kwargs[f.name] = float(raw) if f.type is float else int(raw)
    return TaskSpec(**kwargs)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _split_files(split):
    return f"{split}.features.bin", f"{split}.labels.txt"


def generate_dataset(spec, out_dir):
    """Write train/dev/eval splits with disjoint per-split random streams
    and a manifest recording the spec, counts, and file checksums."""
    from . import checkpoint as ckpt  # tensor encoding shared with checkpoints

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    templates = spec.templates()
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    checksums = {}
    for split, seq in zip(SPLITS, streams):
        rng = np.random.default_rng(seq)
        count = spec.split_counts[split]
        feat_name, label_name = _split_files(split)
        with open(out / feat_name, "wb") as ffh, \
                open(out / label_name, "w", encoding="utf-8", newline="\n") as lfh:
            for i in range(count):
                sample = synth_mixture(spec, rng, templates)
                ckpt.write_tensor(ffh, f"sample{i:06d}", sample.features)
                lfh.write(lab.to_text(sample.label_tokens) + "\n")
        checksums[feat_name] = _sha256(out / feat_name)
        checksums[label_name] = _sha256(out / label_name)

    lines = ["# synthetic overlapped-stream dataset manifest"]
    lines += _spec_lines(spec)
    for split in SPLITS:
        lines.append(f"count.{split} = {spec.split_counts[split]}")
    for name in sorted(checksums):
        lines.append(f"sha256.{name} = {checksums[name]}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out / "manifest.txt"


@dataclass
class Dataset:
    spec: TaskSpec
    splits: dict

    @property
    def vocab(self):
        return self.spec.vocab()

    def __getitem__(self, split):
        return self.splits[split]


def load_dataset(data_dir, verify=True, splits=SPLITS):
    """Read a dataset directory back; checksums are verified by default."""
    from . import checkpoint as ckpt

    root = Path(data_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetError(f"{root}: no manifest.txt")
    kv = _parse_kv(manifest.read_text(encoding="utf-8").splitlines())
    spec = spec_from_kv(kv)

    loaded = {}
    for split in splits:
        feat_name, label_name = _split_files(split)
        count = int(kv.get(f"count.{split}", spec.split_counts[split]))
        if verify:
            for name in (feat_name, label_name):
                expected = kv.get(f"sha256.{name}")
                if expected is None:
                    raise DatasetError(f"manifest lacks checksum for {name}")
                actual = _sha256(root / name)
                if actual != expected:
                    raise DatasetError(
                        f"{name}: checksum mismatch (expected {expected[:12]}.., "
                        f"got {actual[:12]}..)")
        label_lines = (root / label_name).read_text(encoding="utf-8").splitlines()
        if len(label_lines) != count:
            raise DatasetError(
                f"{label_name}: {len(label_lines)} lines, manifest says {count}")
        samples = []
        with open(root / feat_name, "rb") as fh:
            for i in range(count):
                _, features = ckpt.read_tensor(fh)
                samples.append(MixtureSample(
                    features=features,
                    label_tokens=lab.from_text(label_lines[i])))
            if fh.read(1):
                raise DatasetError(f"{feat_name}: trailing bytes after {count} samples")
        loaded[split] = samples
    return Dataset(spec=spec, splits=loaded)
