"""Programmatic construction of instruction-guided audio-editing triplets.

The forge builds editing examples from first principles: a background bed,
one or more labeled foreground events placed at known onsets, and the three
task views (add, remove, extract) derived from the same composition. Because
every mixture is assembled as ``background + stem_0 + stem_1 + ...`` with a
fixed summation order, the task algebra holds sample-exactly in memory:
``add.target == remove.source``, ``add.source == remove.target``, and the
extract target is the placed stem itself.

Scene randomness is fully parameterized: an :class:`EventSpec` records the
clip, onset, SNR, pitch shift, and stretch factor, so re-composing a scene
from its spec is bit-reproducible. Corpus generation derives one RNG per
item from ``(master seed, task index, item index)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .audio import (
    AudioBuffer,
    mix_at_snr,
    pitch_shift,
    read_wav,
    time_stretch,
    vad_activity_ratio,
    write_wav,
)

log = logging.getLogger(__name__)

TASKS = ("add", "remove", "extract")
PROVENANCES = ("synthesis", "real-replay")

SNR_RANGE = (0.0, 3.0)
PITCH_RANGE = (-3.0, 3.0)
STRETCH_RANGE = (0.8, 1.2)

DEFAULT_SCENE_SECONDS = 10.0
DESK_ITEMS_PER_TASK = 150
FULL_SCALE_ITEMS_PER_TASK = 150_000
VAD_KEEP_THRESHOLD = 0.3

BACKGROUND_LABEL = "background"
MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventSpec:
    """One foreground event: which clip, where, and how it is transformed.

    Transform order during composition is stretch, then pitch, then SNR
    mixing, and ``snr_db`` is measured against the background over the
    placed extent of the transformed clip.
    """

    clip_id: str
    label: str
    onset_s: float
    snr_db: float
    pitch_semitones: float
    stretch: float
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.clip_id:
            raise ValueError("clip_id must be a non-empty string")
        if not self.label:
            raise ValueError("label must be a non-empty string")
        if self.onset_s < 0:
            raise ValueError(f"onset_s must be >= 0, got {self.onset_s}")
        if not (SNR_RANGE[0] <= self.snr_db <= SNR_RANGE[1]):
            raise ValueError(f"snr_db must lie in {SNR_RANGE}, got {self.snr_db}")
        if not (PITCH_RANGE[0] <= self.pitch_semitones <= PITCH_RANGE[1]):
            raise ValueError(
                f"pitch_semitones must lie in {PITCH_RANGE}, got {self.pitch_semitones}"
            )
        if not (STRETCH_RANGE[0] <= self.stretch <= STRETCH_RANGE[1]):
            raise ValueError(f"stretch must lie in {STRETCH_RANGE}, got {self.stretch}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class SceneSpec:
    """A background bed plus a tuple of events, deterministic given ``seed``."""

    background_id: str
    events: tuple[EventSpec, ...] = ()
    duration_s: float = DEFAULT_SCENE_SECONDS
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.background_id:
            raise ValueError("background_id must be a non-empty string")
        object.__setattr__(self, "events", tuple(self.events))
        for ev in self.events:
            if not isinstance(ev, EventSpec):
                raise TypeError(f"events must be EventSpec instances, got {type(ev)}")
        if self.duration_s <= 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if not isinstance(self.seed, (int, np.integer)) or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed!r}")
        object.__setattr__(self, "seed", int(self.seed))


@dataclass
class EditTriplet:
    """One editing example: an instruction plus source/target audio.

    ``event_stem`` carries the placed foreground stem for downstream
    filtering; it is not part of the written manifest. ``source_path`` and
    ``target_path`` stay ``None`` until :func:`write_triplet_audio` assigns
    the on-disk locations (relative to the dataset root).
    """

    id: str
    task: str
    instruction: str
    event: EventSpec
    seed: int
    provenance: str = "synthesis"
    source_audio: AudioBuffer | None = None
    target_audio: AudioBuffer | None = None
    event_stem: AudioBuffer | None = None
    source_path: str | None = None
    target_path: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("triplet id must be a non-empty string")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}"
            )
        if self.event.label not in self.instruction:
            raise ValueError(
                f"instruction must contain the event label verbatim: "
                f"{self.event.label!r} not in {self.instruction!r}"
            )
        self.seed = int(self.seed)


# ---------------------------------------------------------------------------
# Clip libraries
# ---------------------------------------------------------------------------


class SyntheticLibrary:
    """Deterministic bank of labeled synthetic clips plus noise backgrounds.

    Every event label has ``variants`` clips (``"<label>/v<k>"``) built from
    closed-form primitives: tones, chirps, band-passed noise bursts, click
    trains, and frequency-modulated warbles. Clips regenerate bit-identically
    on every :meth:`resolve` call, so the library needs no storage.
    """

    def __init__(
        self,
        sample_rate: int = 44100,
        clip_seconds: float = 1.0,
        background_seconds: float = DEFAULT_SCENE_SECONDS,
        variants: int = 3,
        seed: int = 0,
    ) -> None:
        if sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if clip_seconds <= 0 or background_seconds <= 0:
            raise ValueError("clip durations must be positive")
        if variants < 1:
            raise ValueError("variants must be >= 1")
        self.sample_rate = int(sample_rate)
        self.clip_seconds = float(clip_seconds)
        self.background_seconds = float(background_seconds)
        self.variants = int(variants)
        self.seed = int(seed)
        self._generators: dict[str, Callable[[np.ndarray, int, np.random.Generator], np.ndarray]] = {
            "sine tone": self._sine_tone,
            "low hum": self._low_hum,
            "rising chirp": self._rising_chirp,
            "falling chirp": self._falling_chirp,
            "noise burst": self._noise_burst,
            "click train": self._click_train,
            "warble": self._warble,
        }

    # -- catalogue ----------------------------------------------------------

    def labels(self) -> list[str]:
        return sorted(self._generators)

    def clip_ids(self, label: str) -> list[str]:
        if label == BACKGROUND_LABEL:
            return self.background_ids()
        if label not in self._generators:
            raise KeyError(f"unknown label {label!r}")
        return [f"{label}/v{k}" for k in range(self.variants)]

    def background_ids(self) -> list[str]:
        return [f"{BACKGROUND_LABEL}/v{k}" for k in range(self.variants)]

    def clip_duration_s(self, clip_id: str) -> float:
        label, _ = self._parse(clip_id)
        return self.background_seconds if label == BACKGROUND_LABEL else self.clip_seconds

    # -- synthesis ----------------------------------------------------------

    def resolve(self, clip_id: str) -> AudioBuffer:
        label, variant = self._parse(clip_id)
        if label == BACKGROUND_LABEL:
            n = int(round(self.background_seconds * self.sample_rate))
            rng = np.random.default_rng([self.seed, 0x6267, variant])
            return AudioBuffer(0.1 * _pink_noise(rng, n), self.sample_rate)
        n = int(round(self.clip_seconds * self.sample_rate))
        t = np.arange(n, dtype=np.float64) / self.sample_rate
        label_index = self.labels().index(label)
        rng = np.random.default_rng([self.seed, label_index, variant])
        samples = self._generators[label](t, variant, rng)
        return AudioBuffer(samples, self.sample_rate)

    def _parse(self, clip_id: str) -> tuple[str, int]:
        label, sep, tail = clip_id.partition("/")
        if not sep or not tail.startswith("v"):
            raise KeyError(f"malformed clip id {clip_id!r}; expected '<label>/v<k>'")
        if label != BACKGROUND_LABEL and label not in self._generators:
            raise KeyError(f"unknown label {label!r}")
        try:
            variant = int(tail[1:])
        except ValueError:
            raise KeyError(f"malformed clip id {clip_id!r}") from None
        if not (0 <= variant < self.variants):
            raise KeyError(f"variant {variant} out of range for {label!r}")
        return label, variant

    # Each generator keeps a comfortable margin above the -40 dBFS VAD
    # threshold over most of the clip, so the default corpus retains well.

    def _sine_tone(self, t, variant, rng):
        f = 440.0 * 2.0 ** (variant * 4.0 / 12.0)
        return 0.25 * np.sin(2.0 * np.pi * f * t) * _edge_fade(t.size, self.sample_rate)

    def _low_hum(self, t, variant, rng):
        f = 55.0 * 2.0 ** (variant * 3.0 / 12.0)
        x = np.sin(2.0 * np.pi * f * t) + 0.3 * np.sin(2.0 * np.pi * 2.0 * f * t)
        return 0.25 * x / np.max(np.abs(x)) * _edge_fade(t.size, self.sample_rate)

    def _rising_chirp(self, t, variant, rng):
        f0 = 200.0 * (variant + 1)
        d = t[-1] + 1.0 / self.sample_rate
        phase = 2.0 * np.pi * (f0 * t + (7.0 * f0) * t**2 / (2.0 * d))
        return 0.25 * np.sin(phase) * _edge_fade(t.size, self.sample_rate)

    def _falling_chirp(self, t, variant, rng):
        return self._rising_chirp(t, variant, rng)[::-1].copy()

    def _noise_burst(self, t, variant, rng):
        lo = 500.0 * 2.0**variant
        hi = 3.0 * lo
        x = rng.standard_normal(t.size)
        spec = np.fft.rfft(x)
        freqs = np.fft.rfftfreq(t.size, d=1.0 / self.sample_rate)
        spec[(freqs < lo) | (freqs > hi)] = 0.0
        x = np.fft.irfft(spec, n=t.size)
        x = x / np.max(np.abs(x)) * _plateau_envelope(t.size)
        return 0.25 * x

    def _click_train(self, t, variant, rng):
        period = int(round(self.sample_rate * (0.030 + 0.010 * variant)))
        click_len = max(int(round(self.sample_rate * 0.010)), 1)
        kernel = np.exp(-np.arange(click_len) / (0.002 * self.sample_rate))
        out = np.zeros(t.size)
        sign = 1.0
        for start in range(0, t.size, max(period, 1)):
            stop = min(start + click_len, t.size)
            out[start:stop] += sign * kernel[: stop - start]
            sign = -sign
        return 0.3 * out

    def _warble(self, t, variant, rng):
        beta = 2.0 + 2.0 * variant
        phase = 2.0 * np.pi * 660.0 * t + beta * np.sin(2.0 * np.pi * 5.0 * t)
        return 0.25 * np.sin(phase) * _edge_fade(t.size, self.sample_rate)


class FolderLibrary:
    """Clip library rooted at ``root/<label>/<clip>.wav``.

    The directory name is the label; files under ``background/`` serve as
    scene beds and are excluded from :meth:`labels`. Clip ids are
    ``"<label>/<filename-without-extension>"``.
    """

    def __init__(self, root) -> None:
        self.root = Path(root)
        if not self.root.is_dir():
            raise ValueError(f"library root {self.root} is not a directory")
        self._clips: dict[str, list[str]] = {}
        for label_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            wavs = sorted(p.name for p in label_dir.iterdir() if p.suffix == ".wav")
            if wavs:
                self._clips[label_dir.name] = [f"{label_dir.name}/{Path(w).stem}" for w in wavs]
        if not self._clips:
            raise ValueError(f"library root {self.root} contains no '<label>/<clip>.wav' files")

    def labels(self) -> list[str]:
        return sorted(l for l in self._clips if l != BACKGROUND_LABEL)

    def clip_ids(self, label: str) -> list[str]:
        if label not in self._clips:
            raise KeyError(f"unknown label {label!r}")
        return list(self._clips[label])

    def background_ids(self) -> list[str]:
        return list(self._clips.get(BACKGROUND_LABEL, []))

    def clip_duration_s(self, clip_id: str) -> float:
        return self.resolve(clip_id).duration_s

    def resolve(self, clip_id: str) -> AudioBuffer:
        label, _, stem = clip_id.partition("/")
        if label not in self._clips or clip_id not in self._clips[label]:
            raise KeyError(f"unknown clip id {clip_id!r}")
        return read_wav(self.root / label / f"{stem}.wav")


# ---------------------------------------------------------------------------
# Scene composition
# ---------------------------------------------------------------------------


class SoundscapeResult(NamedTuple):
    mixture: AudioBuffer
    stems: tuple[AudioBuffer, ...]
    background: AudioBuffer


def compose_soundscape(scene: SceneSpec, library) -> SoundscapeResult:
    """Realize a scene: transformed events placed over the background bed.

    Each event clip is stretched, then pitch-shifted, then scaled to its
    target SNR against the background and placed at its onset. The mixture
    is ``background + stem_0 + stem_1 + ...`` accumulated in event order, so
    re-summing the returned parts in that order reproduces it bit-exactly.
    """
    background = library.resolve(scene.background_id)
    rate = background.sample_rate
    n = int(round(scene.duration_s * rate))
    if len(background) < n:
        raise ValueError(
            f"background {scene.background_id!r} is shorter than the scene: "
            f"{len(background)} < {n} samples"
        )
    background = AudioBuffer(background.samples[:n].copy(), rate)

    stems: list[AudioBuffer] = []
    for ev in scene.events:
        clip = library.resolve(ev.clip_id)
        if clip.sample_rate != rate:
            raise ValueError(
                f"clip {ev.clip_id!r} rate {clip.sample_rate} != background rate {rate}"
            )
        if ev.stretch != 1.0:
            clip = time_stretch(clip, ev.stretch)
        if ev.pitch_semitones != 0.0:
            clip = pitch_shift(clip, ev.pitch_semitones)
        onset = int(round(ev.onset_s * rate))
        if onset + len(clip) > n:
            raise ValueError(
                f"event {ev.label!r} overruns the scene: onset {ev.onset_s:.3f}s + "
                f"{len(clip)} samples exceeds {scene.duration_s:.3f}s"
            )
        placed = mix_at_snr(clip, background, ev.snr_db, ev.onset_s)
        stems.append(placed.foreground_stem)

    mixture = background.samples.copy()
    for stem in stems:
        mixture = mixture + stem.samples
    return SoundscapeResult(AudioBuffer(mixture, rate), tuple(stems), background)


# ---------------------------------------------------------------------------
# Triplet construction
# ---------------------------------------------------------------------------

_TEMPLATES: dict[str, tuple[str, ...]] = {
    "add": (
        "Add a {label} to the recording.",
        "Please add a {label} into the scene.",
        "Insert a {label} over the background.",
        "Layer a {label} on top of this clip.",
        "Mix a {label} into the audio.",
    ),
    "remove": (
        "Remove the {label} from the recording.",
        "Please take the {label} out of the scene.",
        "Delete the {label} from this clip.",
        "Get rid of the {label} in the audio.",
        "Erase the {label} from the mix.",
    ),
    "extract": (
        "Extract the {label} from the recording.",
        "Isolate the {label} from the scene.",
        "Pull the {label} out of this clip.",
        "Keep only the {label} from the audio.",
        "Separate the {label} from the mix.",
    ),
}


def instruction_for(task: str, label: str, rng: np.random.Generator) -> str:
    """Draw one of the task's seeded instruction templates for ``label``."""
    if task not in _TEMPLATES:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    bank = _TEMPLATES[task]
    return bank[int(rng.integers(len(bank)))].format(label=label)


def make_triplet(
    task: str,
    scene: SceneSpec,
    library,
    event_index: int = 0,
    triplet_id: str | None = None,
) -> EditTriplet:
    """Build one editing triplet around ``scene.events[event_index]``.

    All three tasks share one canonical pair of renders: ``minus`` is the
    scene without the chosen event (background plus the other stems in
    composition order) and ``full`` is ``minus + stem``. Calling this for
    each task on the same scene therefore yields sample-exact algebra, e.g.
    the add target equals the remove source bitwise.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if not scene.events:
        raise ValueError("scene has no events to edit")
    if not (0 <= event_index < len(scene.events)):
        raise ValueError(
            f"event_index {event_index} out of range for {len(scene.events)} events"
        )

    composed = compose_soundscape(scene, library)
    rate = composed.background.sample_rate
    minus = composed.background.samples.copy()
    for j, stem in enumerate(composed.stems):
        if j != event_index:
            minus = minus + stem.samples
    stem = composed.stems[event_index]
    full = minus + stem.samples

    event = scene.events[event_index]
    rng = np.random.default_rng([scene.seed, event_index, TASKS.index(task)])
    instruction = instruction_for(task, event.label, rng)
    if triplet_id is None:
        triplet_id = f"{task}-s{scene.seed}-e{event_index}"

    minus_buf = AudioBuffer(minus, rate)
    full_buf = AudioBuffer(full, rate)
    if task == "add":
        source, target = minus_buf, full_buf
    elif task == "remove":
        source, target = full_buf, minus_buf
    else:
        source, target = full_buf, stem
    return EditTriplet(
        id=triplet_id,
        task=task,
        instruction=instruction,
        event=event,
        seed=scene.seed,
        provenance="synthesis",
        source_audio=source,
        target_audio=target,
        event_stem=stem,
    )


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

FilterStage = tuple[str, Callable[[EditTriplet], bool]]


class FilterReport(NamedTuple):
    kept: list[EditTriplet]
    rejected: dict[str, int]


def trimmed_stem(stem: AudioBuffer) -> AudioBuffer | None:
    """The stem cut to its non-zero extent, or None for an all-zero stem.

    Stems live on the full scene timeline; judging voice activity on the
    padded array would dilute the ratio by the scene length, so activity is
    measured over the event's own span.
    """
    nonzero = np.flatnonzero(stem.samples)
    if nonzero.size == 0:
        return None
    return AudioBuffer(stem.samples[nonzero[0] : nonzero[-1] + 1].copy(), stem.sample_rate)


def vad_stage(threshold: float = VAD_KEEP_THRESHOLD) -> FilterStage:
    """Keep triplets whose trimmed event stem has activity ratio >= threshold."""

    def keep(triplet: EditTriplet) -> bool:
        if triplet.event_stem is None:
            raise ValueError(f"triplet {triplet.id!r} carries no event stem to screen")
        trimmed = trimmed_stem(triplet.event_stem)
        ratio = 0.0 if trimmed is None else vad_activity_ratio(trimmed)
        return ratio >= threshold

    return ("vad", keep)


def semantic_stage(
    scorer: Callable[[EditTriplet], float] | None = None,
    threshold: float = 0.5,
) -> FilterStage:
    """Keep triplets whose semantic score >= threshold.

    The bundled default scorer returns 1.0 for everything: a stand-in for a
    learned audio-text matcher, so the default pipeline is a pure pass-through
    that still reports the stage in its counts.
    """
    if scorer is None:

        def scorer(triplet: EditTriplet) -> float:
            return 1.0

    def keep(triplet: EditTriplet) -> bool:
        score = float(scorer(triplet))
        log.debug("semantic score %.3f for %s", score, triplet.id)
        return score >= threshold

    return ("semantic", keep)


def default_stages(
    vad_threshold: float = VAD_KEEP_THRESHOLD,
    semantic_scorer: Callable[[EditTriplet], float] | None = None,
) -> list[FilterStage]:
    return [vad_stage(vad_threshold), semantic_stage(semantic_scorer)]


def filter_pipeline(
    candidates: Iterable[EditTriplet],
    stages: Sequence[FilterStage] | None = None,
) -> FilterReport:
    """Run candidates through ordered keep/reject stages.

    A triplet is charged to the first stage that rejects it; later stages
    never see it. Returns the kept triplets (original order) and a rejection
    count per stage, including zero counts for stages that rejected nothing.
    """
    if stages is None:
        stages = default_stages()
    names = [name for name, _ in stages]
    if len(set(names)) != len(names):
        raise ValueError(f"stage names must be unique, got {names}")
    rejected = {name: 0 for name in names}
    kept: list[EditTriplet] = []
    total = 0
    for triplet in candidates:
        total += 1
        for name, keep in stages:
            if not keep(triplet):
                rejected[name] += 1
                log.info("filter: rejected %s at stage %r", triplet.id, name)
                break
        else:
            kept.append(triplet)
    if total:
        log.info(
            "filter: kept %d/%d (%.1f%%); rejections %s",
            len(kept), total, 100.0 * len(kept) / total, rejected,
        )
    return FilterReport(kept, rejected)


# ---------------------------------------------------------------------------
# Writing: audio files and the manifest
# ---------------------------------------------------------------------------


def write_triplet_audio(triplet: EditTriplet, root, wav_format: str = "float32") -> EditTriplet:
    """Write source/target WAVs under ``root/audio`` and record relative paths."""
    if triplet.source_audio is None or triplet.target_audio is None:
        raise ValueError(f"triplet {triplet.id!r} has no audio to write")
    root = Path(root)
    audio_dir = root / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    source_rel = f"audio/{triplet.id}_src.wav"
    target_rel = f"audio/{triplet.id}_tgt.wav"
    write_wav(triplet.source_audio, root / source_rel, format=wav_format)
    write_wav(triplet.target_audio, root / target_rel, format=wav_format)
    triplet.source_path = source_rel
    triplet.target_path = target_rel
    return triplet


def manifest_item(triplet: EditTriplet) -> dict:
    if triplet.source_path is None or triplet.target_path is None:
        raise ValueError(f"triplet {triplet.id!r} has not been written; paths are unset")
    return {
        "id": triplet.id,
        "task": triplet.task,
        "instruction": triplet.instruction,
        "source_path": triplet.source_path,
        "target_path": triplet.target_path,
        "event": {
            "label": triplet.event.label,
            "onset_s": float(triplet.event.onset_s),
            "snr_db": float(triplet.event.snr_db),
            "pitch_semitones": float(triplet.event.pitch_semitones),
            "stretch": float(triplet.event.stretch),
        },
        "seed": int(triplet.seed),
        "provenance": triplet.provenance,
    }


def write_manifest(triplets: Sequence[EditTriplet], root, config: dict | None = None) -> Path:
    """Serialize the manifest (items ordered by id) to ``root/manifest.json``.

    ``config`` optionally embeds the fully resolved run configuration so the
    dataset records how it was produced.
    """
    ids = [t.id for t in triplets]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValueError(f"duplicate triplet ids: {dupes}")
    items = sorted((manifest_item(t) for t in triplets), key=lambda item: item["id"])
    payload = {"version": MANIFEST_VERSION, "items": items}
    if config is not None:
        payload["config"] = config
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> dict:
    payload = json.loads(Path(path).read_text())
    if not isinstance(payload, dict) or payload.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version in {path}")
    if not isinstance(payload.get("items"), list):
        raise ValueError(f"manifest {path} has no item list")
    return payload


# ---------------------------------------------------------------------------
# Corpus generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ForgeConfig:
    """Corpus-generation knobs. The default is the desk-scale preset."""

    items_per_task: int = DESK_ITEMS_PER_TASK
    tasks: tuple[str, ...] = TASKS
    duration_s: float = DEFAULT_SCENE_SECONDS
    events_per_scene: int = 1
    seed: int = 0
    vad_threshold: float = VAD_KEEP_THRESHOLD
    wav_format: str = "float32"

    def __post_init__(self) -> None:
        if self.items_per_task < 0:
            raise ValueError("items_per_task must be >= 0")
        object.__setattr__(self, "tasks", tuple(self.tasks))
        for task in self.tasks:
            if task not in TASKS:
                raise ValueError(f"unknown task {task!r}; expected a subset of {TASKS}")
        if not self.tasks:
            raise ValueError("tasks must be non-empty")
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        if self.events_per_scene < 1:
            raise ValueError("events_per_scene must be >= 1")
        if not (0.0 <= self.vad_threshold <= 1.0):
            raise ValueError("vad_threshold must lie in [0, 1]")

    @classmethod
    def full_scale(cls, **overrides) -> "ForgeConfig":
        """The full-scale preset (150k items per task). Never run in tests."""
        overrides.setdefault("items_per_task", FULL_SCALE_ITEMS_PER_TASK)
        return cls(**overrides)


def draw_event(rng: np.random.Generator, library, scene_duration_s: float) -> EventSpec:
    """Sample one event uniformly over the library and parameter ranges.

    The onset is drawn so the stretched clip fits inside the scene; a clip
    too long to fit at maximum stretch raises instead of clamping.
    """
    labels = library.labels()
    if not labels:
        raise ValueError("library has no event labels")
    label = labels[int(rng.integers(len(labels)))]
    clip_ids = library.clip_ids(label)
    clip_id = clip_ids[int(rng.integers(len(clip_ids)))]
    stretch = float(rng.uniform(*STRETCH_RANGE))
    pitch = float(rng.uniform(*PITCH_RANGE))
    snr = float(rng.uniform(*SNR_RANGE))
    stretched_s = library.clip_duration_s(clip_id) * stretch
    latest = scene_duration_s - stretched_s
    if latest < 0:
        raise ValueError(
            f"clip {clip_id!r} cannot fit a {scene_duration_s:.3f}s scene at stretch "
            f"{stretch:.3f}"
        )
    onset = float(rng.uniform(0.0, latest))
    return EventSpec(
        clip_id=clip_id,
        label=label,
        onset_s=onset,
        snr_db=snr,
        pitch_semitones=pitch,
        stretch=stretch,
        seed=int(rng.integers(2**63)),
    )


def draw_scene(rng: np.random.Generator, library, config: ForgeConfig) -> SceneSpec:
    backgrounds = library.background_ids()
    if not backgrounds:
        raise ValueError("library has no backgrounds")
    background_id = backgrounds[int(rng.integers(len(backgrounds)))]
    events = tuple(
        draw_event(rng, library, config.duration_s) for _ in range(config.events_per_scene)
    )
    return SceneSpec(
        background_id=background_id,
        events=events,
        duration_s=config.duration_s,
        seed=int(rng.integers(2**63)),
    )


class ForgeSummary(NamedTuple):
    manifest_path: Path
    counts: dict


def forge_corpus(
    library, root, config: ForgeConfig | None = None, echo: dict | None = None
) -> ForgeSummary:
    """Generate, filter, and write a full editing corpus under ``root``.

    One scene is drawn per (task, item index) from an RNG seeded by
    ``(config.seed, task index, item index)``, so runs with equal configs
    and libraries are bit-identical and runs with different seeds diverge.
    Items are mutually independent, so the per-item loop is trivially
    parallelizable; generation runs single-process to keep outputs
    reproducible everywhere. Returns the manifest path plus per-task
    generated/kept/rejected counts. ``echo`` is embedded in the manifest.
    """
    if config is None:
        config = ForgeConfig()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    kept_all: list[EditTriplet] = []
    counts: dict = {}
    for task_index, task in enumerate(config.tasks):
        candidates = []
        for i in range(config.items_per_task):
            rng = np.random.default_rng([config.seed, task_index, i])
            scene = draw_scene(rng, library, config)
            event_index = int(rng.integers(config.events_per_scene))
            candidates.append(
                make_triplet(
                    task, scene, library, event_index,
                    triplet_id=f"{task}-{config.seed}-{i:06d}",
                )
            )
        report = filter_pipeline(candidates, default_stages(config.vad_threshold))
        counts[task] = {
            "generated": len(candidates),
            "kept": len(report.kept),
            "rejected": dict(report.rejected),
        }
        kept_all.extend(report.kept)

    for triplet in kept_all:
        write_triplet_audio(triplet, root, wav_format=config.wav_format)
    manifest_path = write_manifest(kept_all, root, config=echo)
    log.info("forged %d triplets into %s", len(kept_all), root)
    return ForgeSummary(manifest_path, counts)


# ---------------------------------------------------------------------------
# Waveform helpers for the synthetic library
# ---------------------------------------------------------------------------


def _edge_fade(n: int, sample_rate: int, fade_s: float = 0.01) -> np.ndarray:
    """Unit envelope with raised-cosine edges to avoid onset/offset clicks."""
    env = np.ones(n)
    ramp = min(int(round(fade_s * sample_rate)), n // 2)
    if ramp > 0:
        shape = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = shape
        env[n - ramp :] = shape[::-1]
    return env


def _plateau_envelope(n: int, active: tuple[float, float] = (0.1, 0.9), ramp_frac: float = 0.05) -> np.ndarray:
    """Envelope that is zero outside ``active`` (fractions of n), 1.0 inside."""
    env = np.zeros(n)
    a = int(n * active[0])
    b = int(n * active[1])
    env[a:b] = 1.0
    ramp = max(int(n * ramp_frac), 1)
    if b - a > 2 * ramp:
        shape = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[a : a + ramp] = shape
        env[b - ramp : b] = shape[::-1]
    return env


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    """1/f-shaped noise, peak-normalized."""
    bins = n // 2 + 1
    spec = rng.standard_normal(bins) + 1j * rng.standard_normal(bins)
    f = np.arange(bins, dtype=np.float64)
    f[0] = 1.0
    x = np.fft.irfft(spec / np.sqrt(f), n=n)
    return x / np.max(np.abs(x))
