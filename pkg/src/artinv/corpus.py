"""Corpus format (manifest + WAV + EMA CSV) and a synthetic parallel corpus.

On disk a corpus is a directory holding ``manifest.json``, ``audio/*.wav``
(16-bit PCM mono) and ``ema/*.csv`` (header row = the 12 sensor channel
names, values in mm). Paths in the manifest are relative to its directory.

The synthetic generator draws smooth band-limited sensor trajectories and
renders audio whose spectral envelope is a fixed affine+tanh function of
the articulator positions, so the acoustic -> articulatory map is learnable.
"""

from __future__ import annotations

import json
import logging
import wave
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ema import SENSOR_CHANNELS, EmaRecording
from .errors import LoadError, SchemaError
from .frontend import SAMPLE_RATE, Waveform, hz_to_mel

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"

# neutral sensor positions (mm), canonical channel order
NEUTRAL_POSE = np.array([
    5.0, 12.0,    # UL
    4.0, -12.0,   # LL
    2.0, -6.0,    # LI
    -8.0, 6.0,    # TT
    -25.0, 10.0,  # TB
    -40.0, 6.0,   # TD
])
# typical excursion of each sensor channel (mm)
MOTION_SCALE = np.array([1.0, 2.0, 1.5, 4.0, 0.8, 2.5, 3.0, 4.0, 3.0, 4.0, 2.5, 3.5])


@dataclass
class SpeakerEntry:
    id: str
    dialect: str = ""
    ema_sample_rate: float = 100.0


@dataclass
class UtteranceEntry:
    id: str
    speaker: str
    audio: str
    ema: str
    duration: float


@dataclass
class CorpusManifest:
    corpus: str
    speakers: list = field(default_factory=list)
    utterances: list = field(default_factory=list)

    def __post_init__(self):
        ids = [u.id for u in self.utterances]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate utterance ids in corpus {self.corpus}")
        known = {s.id for s in self.speakers}
        for u in self.utterances:
            if u.speaker not in known:
                raise SchemaError(f"utterance {u.id} names unknown speaker {u.speaker}")
            if u.duration <= 0:
                raise SchemaError(f"utterance {u.id} has non-positive duration")

    def speaker(self, speaker_id: str) -> SpeakerEntry:
        return next(s for s in self.speakers if s.id == speaker_id)

    def to_dict(self) -> dict:
        return {"corpus": self.corpus,
                "speakers": [asdict(s) for s in self.speakers],
                "utterances": [asdict(u) for u in self.utterances]}

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusManifest":
        try:
            return cls(d["corpus"],
                       [SpeakerEntry(**s) for s in d["speakers"]],
                       [UtteranceEntry(**u) for u in d["utterances"]])
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed manifest: {exc}") from None


@dataclass
class Utterance:
    id: str
    speaker: str
    corpus: str
    waveform: Waveform
    ema: EmaRecording


@dataclass
class Corpus:
    manifest: CorpusManifest
    root: Path
    utterances: dict

    @property
    def name(self) -> str:
        return self.manifest.corpus

    def __len__(self):
        return len(self.utterances)


# ---------------------------------------------------------------------------
# file formats


def write_wav(path: Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.tobytes())


def read_wav(path: Path) -> tuple[np.ndarray, int]:
    """Mono 16-bit PCM -> float samples in [-1, 1) and the sample rate."""
    with wave.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise SchemaError(f"{path}: expected mono 16-bit PCM")
        rate = fh.getframerate()
        data = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32768.0, rate


def write_ema_csv(path: Path, data: np.ndarray) -> None:
    with Path(path).open("w") as fh:
        fh.write(",".join(SENSOR_CHANNELS) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.6f")


def read_ema_csv(path: Path, sample_rate: float) -> EmaRecording:
    with Path(path).open() as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
        if sorted(header) != sorted(SENSOR_CHANNELS):
            raise SchemaError(f"{path}: EMA header {header} is not the 12 canonical channels")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise SchemaError(f"{path}: {data.shape[1]} columns for {len(header)} names")
    return EmaRecording({name: data[:, i] for i, name in enumerate(header)}, sample_rate)


def write_manifest(root: Path, manifest: CorpusManifest) -> Path:
    path = Path(root) / MANIFEST_NAME
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    return path


def read_manifest(path: Path) -> CorpusManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc}") from None
    except ValueError as exc:
        raise SchemaError(f"manifest {path} is not valid JSON: {exc}") from None
    return CorpusManifest.from_dict(data)


def load_corpus(manifest_path) -> Corpus:
    """Load every utterance named by a manifest (file or corpus directory)."""
    manifest_path = Path(manifest_path)
    root = manifest_path if manifest_path.is_dir() else manifest_path.parent
    manifest = read_manifest(manifest_path)
    rates = {s.id: s.ema_sample_rate for s in manifest.speakers}
    utts = {}
    for u in manifest.utterances:
        audio_path, ema_path = root / u.audio, root / u.ema
        for p in (audio_path, ema_path):
            if not p.is_file():
                raise LoadError(f"utterance {u.id}: missing file {p}")
        samples, rate = read_wav(audio_path)
        ema = read_ema_csv(ema_path, rates[u.speaker])
        utts[u.id] = Utterance(u.id, u.speaker, manifest.corpus, Waveform(samples, rate), ema)
    return Corpus(manifest, root, utts)


# ---------------------------------------------------------------------------
# synthesis


@dataclass(frozen=True)
class SyntheticSpec:
    name: str = "synth"
    n_speakers: int = 1
    utterances_per_speaker: int = 20
    duration_range: tuple = (1.8, 2.2)
    band_limit_hz: float = 8.0
    seed: int = 0
    map_seed: int = 1234
    noise_level: float = 0.01
    ema_sample_rate: float = 100.0
    speaker_offset_mm: float = 0.8
    speaker_map_jitter: float = 0.15
    envelope_depth: float = 0.8
    global_offset_mm: float = 0.0
    dialect: str = ""

    def __post_init__(self):
        if self.n_speakers < 1 or self.utterances_per_speaker < 1:
            raise ValueError("need positive speaker and utterance counts")
        if not 0 < self.band_limit_hz <= 15.0:
            raise ValueError("band limit must be in (0, 15] Hz")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ValueError("bad duration range")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        if "duration_range" in d:
            d["duration_range"] = tuple(d["duration_range"])
        return cls(**d)


class ForwardMap:
    """Articulator positions (12, mm) -> 13-dim spectral envelope code.

    ``code = tanh(A @ z + b)`` with ``z`` the pose relative to the neutral
    position in units of typical excursion.
    """

    def __init__(self, seed: int, n_codes: int = 13, gain: float = 0.6):
        rng = np.random.default_rng(seed)
        n_in = len(SENSOR_CHANNELS)
        # code 0 only sets loudness, which peak normalisation removes; the
        # remaining rows get an orthogonal core so the inverse is well conditioned
        q, _ = np.linalg.qr(rng.normal(size=(n_in, n_in)))
        self.A = np.vstack([rng.normal(size=(1, n_in)) * gain / np.sqrt(n_in), gain * q[: n_codes - 1]])
        self.b = rng.normal(size=n_codes) * 0.2

    def perturbed(self, rng: np.random.Generator, jitter: float) -> "ForwardMap":
        out = object.__new__(ForwardMap)
        out.A = self.A + jitter * rng.normal(size=self.A.shape) / np.sqrt(self.A.shape[1])
        out.b = self.b + jitter * 0.2 * rng.normal(size=self.b.shape)
        return out

    def __call__(self, pose: np.ndarray) -> np.ndarray:
        z = (pose - NEUTRAL_POSE) / MOTION_SCALE
        return np.tanh(z @ self.A.T + self.b)


def _sinusoid_params(rng, band_limit):
    chans = []
    for ch in range(len(SENSOR_CHANNELS)):
        k = int(rng.integers(3, 9))
        freqs = rng.uniform(0.3, band_limit, size=k)
        phases = rng.uniform(0, 2 * np.pi, size=k)
        amps = rng.uniform(0.3, 1.0, size=k)
        amps = amps * MOTION_SCALE[ch] / np.sqrt(0.5 * np.sum(amps ** 2))
        chans.append((freqs, phases, amps))
    return chans


def _evaluate(chans, centre, t):
    out = np.empty((t.size, len(chans)))
    for ch, (freqs, phases, amps) in enumerate(chans):
        out[:, ch] = centre[ch] + np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phases[None, :]) @ amps
    return out


def render_audio(codes: np.ndarray, code_rate: float, n_samples: int, f0: float,
                 rng: np.random.Generator, noise_level: float, sample_rate: int = SAMPLE_RATE,
                 depth: float = 1.2) -> np.ndarray:
    """Harmonic + noise synthesis driven by a frame-rate envelope code.

    The log-amplitude envelope over the mel axis is ``sum_k code_k cos(pi k m)``
    for normalised mel position ``m`` in [0, 1].
    """
    n_codes = codes.shape[1]
    t = np.arange(n_samples) / sample_rate
    vibrato = 1.0 + 0.03 * np.sin(2 * np.pi * 0.7 * t + rng.uniform(0, 2 * np.pi))
    f0_t = f0 * vibrato
    base_phase = 2 * np.pi * np.cumsum(f0_t) / sample_rate
    n_harm = int((0.95 * sample_rate / 2) // (f0 * 1.03))
    k = np.arange(1, n_harm + 1)
    # envelope on the code grid, per harmonic of the nominal f0
    m = hz_to_mel(k * f0) / hz_to_mel(sample_rate / 2)
    basis = np.cos(np.pi * np.arange(n_codes)[:, None] * m[None, :])  # (n_codes, n_harm)
    log_amp = depth * codes @ basis  # (frames, n_harm)
    amp_frames = np.exp(log_amp)
    t_codes = np.arange(codes.shape[0]) / code_rate
    out = np.zeros(n_samples)
    phase0 = rng.uniform(0, 2 * np.pi, size=n_harm)
    for j in range(n_harm):
        amp = np.interp(t, t_codes, amp_frames[:, j])
        out += amp * np.sin(k[j] * base_phase + phase0[j])
    rms = np.sqrt(np.mean(out ** 2))
    out += noise_level * rms * rng.normal(size=n_samples)
    return out


def _speaker_setup(spec: SyntheticSpec, index: int, base_map: ForwardMap):
    rng = np.random.default_rng([spec.seed, 1000 + index])
    offset = spec.global_offset_mm + spec.speaker_offset_mm * rng.normal(size=len(SENSOR_CHANNELS))
    fmap = base_map.perturbed(rng, spec.speaker_map_jitter)
    f0 = float(rng.uniform(95.0, 130.0))
    return offset, fmap, f0


def synthesize_utterance(spec: SyntheticSpec, speaker_index: int, utt_index: int,
                         base_map: Optional[ForwardMap] = None):
    """Return (audio samples in [-1, 1], EMA matrix N x 12 in mm) for one utterance."""
    base_map = base_map or ForwardMap(spec.map_seed)
    offset, fmap, f0 = _speaker_setup(spec, speaker_index, base_map)
    rng = np.random.default_rng([spec.seed, speaker_index, utt_index])
    duration = float(rng.uniform(*spec.duration_range))
    n_samples = int(round(duration * SAMPLE_RATE))
    n_ema = int(round(duration * spec.ema_sample_rate))
    chans = _sinusoid_params(rng, spec.band_limit_hz)
    centre = NEUTRAL_POSE + offset
    ema = _evaluate(chans, centre, np.arange(n_ema) / spec.ema_sample_rate)
    # the acoustics see the pose on a 100 Hz grid that covers the whole signal
    code_rate = 100.0
    t_codes = np.arange(int(np.ceil(duration * code_rate)) + 1) / code_rate
    codes = fmap(_evaluate(chans, centre, t_codes))
    audio = render_audio(codes, code_rate, n_samples, f0, rng, spec.noise_level, depth=spec.envelope_depth)
    audio = 0.9 * audio / np.max(np.abs(audio))
    return audio, ema


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir) -> Path:
    """Write a synthetic corpus; the manifest is written last. Returns its path."""
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    (root / "ema").mkdir(parents=True, exist_ok=True)
    base_map = ForwardMap(spec.map_seed)
    speakers, utts = [], []
    for s in range(spec.n_speakers):
        sid = f"{spec.name}_spk{s + 1}"
        speakers.append(SpeakerEntry(sid, spec.dialect, spec.ema_sample_rate))
        for u in range(spec.utterances_per_speaker):
            uid = f"{sid}_u{u + 1:03d}"
            audio, ema = synthesize_utterance(spec, s, u, base_map)
            write_wav(root / "audio" / f"{uid}.wav", audio)
            write_ema_csv(root / "ema" / f"{uid}.csv", ema)
            utts.append(UtteranceEntry(uid, sid, f"audio/{uid}.wav", f"ema/{uid}.csv",
                                       round(len(audio) / SAMPLE_RATE, 6)))
    path = write_manifest(root, CorpusManifest(spec.name, speakers, utts))
    log.info("wrote %d utterances to %s", len(utts), root)
    return path


def shifted_spec(spec: SyntheticSpec, name: str, offset_mm: float = 4.0,
                 map_seed: Optional[int] = None, dialect: str = "B") -> SyntheticSpec:
    """Copy of ``spec`` with a global articulatory offset and another forward map."""
    return SyntheticSpec(**{**asdict(spec), "name": name, "global_offset_mm": spec.global_offset_mm + offset_mm,
                            "map_seed": spec.map_seed + 7919 if map_seed is None else map_seed,
                            "seed": spec.seed + 1, "dialect": dialect})


def two_corpus_synthesis(spec_a: SyntheticSpec, spec_b: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Write two corpora side by side under ``out_dir/<name>``.

    Build ``spec_b`` with :func:`shifted_spec` for the usual domain gap;
    specs that differ only in name produce identical content.
    """
    if spec_a.name == spec_b.name:
        raise ValueError("the two corpora need distinct names")
    out_dir = Path(out_dir)
    return (generate_synthetic_corpus(spec_a, out_dir / spec_a.name),
            generate_synthetic_corpus(spec_b, out_dir / spec_b.name))
