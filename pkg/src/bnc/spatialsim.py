"""Synthetic binaural ground truth: an analytic spatializer (per-ear fractional
delays, distance/shadow gains, seeded reverb tail and noise floor), a random
walking-source trajectory generator, and a clip dataset format (float wav
pairs + pose CSV + manifest)."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .audio import AudioBuffer, read_wav, write_wav
from .geometry import ear_positions, quat_rotate, yaw_quaternion

POSE_RATE = 240.0
SPEED_OF_SOUND = 343.0
EAR_OFFSET_M = 0.09
MAX_WALK_SPEED = 1.5          # m/s
MIN_SOURCE_DISTANCE = 0.1     # gain clamp distance, meters
SINC_HALF_TAPS = 16

POSE_COLUMNS = ["time_s", "tx_x", "tx_y", "tx_z", "tx_qw", "tx_qx", "tx_qy", "tx_qz",
                "rx_x", "rx_y", "rx_z", "rx_qw", "rx_qx", "rx_qy", "rx_qz"]
MANIFEST_COLUMNS = ["clip_id", "mono_wav", "binaural_wav", "pose_csv", "rt60", "noise_db", "seed"]


class DatasetError(ValueError):
    """Malformed dataset file."""


@dataclass(frozen=True)
class RoomSpec:
    horizontal: float = 4.6
    vertical: float = 2.4
    rt60: float = 0.3
    noise_floor_db: float = -50.0

    def __post_init__(self):
        if self.horizontal <= 0 or self.vertical <= 0:
            raise ValueError("room extents must be positive")
        if self.rt60 < 0:
            raise ValueError("rt60 must be >= 0")
        if self.noise_floor_db > 0:
            raise ValueError("noise_floor_db must be <= 0 dBFS")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.horizontal / 2.0, self.horizontal / 2.0, self.vertical / 2.0])


@dataclass
class PoseTrack:
    """Timestamped transmitter/receiver poses at the tracking rate."""

    times: np.ndarray
    tx_pos: np.ndarray
    tx_quat: np.ndarray
    rx_pos: np.ndarray
    rx_quat: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        for name in ("tx_pos", "tx_quat", "rx_pos", "rx_quat"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.times.shape[0]
        if n == 0:
            raise ValueError("pose track is empty")
        if self.tx_pos.shape != (n, 3) or self.rx_pos.shape != (n, 3) \
                or self.tx_quat.shape != (n, 4) or self.rx_quat.shape != (n, 4):
            raise ValueError("pose track field shapes are inconsistent")
        if n > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("pose timestamps must be strictly increasing")

    def rows(self) -> np.ndarray:
        return np.concatenate([self.tx_pos, self.tx_quat, self.rx_pos, self.rx_quat], axis=1)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def static_track(duration: float, tx_pos, rx_pos, rx_yaw: float = 0.0,
                 rate: float = POSE_RATE) -> PoseTrack:
    """A motionless pose pair; handy for controlled spatialization checks."""
    frames = max(2, int(round(rate * duration)))
    times = np.arange(frames) / rate
    tx = np.tile(np.asarray(tx_pos, dtype=np.float64), (frames, 1))
    rx = np.tile(np.asarray(rx_pos, dtype=np.float64), (frames, 1))
    rxq = yaw_quaternion(np.full(frames, rx_yaw))
    txq = yaw_quaternion(np.zeros(frames))
    return PoseTrack(times, tx, txq, rx, rxq)


def gen_trajectory(room: RoomSpec, duration: float, seed: int,
                   rate: float = POSE_RATE) -> PoseTrack:
    """A smoothed random walk for the source; the receiver sits at room center.

    Increment noise is low-pass filtered, speed-clipped to MAX_WALK_SPEED and
    positions are kept inside the room with a margin; the source faces its
    walking direction.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    frames = int(round(rate * duration))
    dt = 1.0 / rate
    margin = min(0.2, room.horizontal / 10.0)

    smooth_n = int(rate / 4)
    kernel = np.ones(smooth_n) / smooth_n
    vel = rng.normal(0.0, 1.0, size=(frames + smooth_n, 3))
    vel[:, 2] *= 0.1   # mostly horizontal motion
    vel = np.stack([np.convolve(vel[:, i], kernel, mode="same") for i in range(3)], axis=1)
    vel = vel[:frames] * MAX_WALK_SPEED
    speed = np.linalg.norm(vel, axis=1, keepdims=True)
    over = speed > MAX_WALK_SPEED
    vel = np.where(over, vel * (MAX_WALK_SPEED / np.maximum(speed, 1e-12)), vel)

    start = np.array([rng.uniform(margin, room.horizontal - margin),
                      rng.uniform(margin, room.horizontal - margin),
                      np.clip(1.5, margin, room.vertical - margin)])
    pos = np.empty((frames, 3))
    p = start.copy()
    lo = np.array([margin, margin, margin])
    hi = np.array([room.horizontal - margin, room.horizontal - margin, room.vertical - margin])
    for i in range(frames):
        p = np.clip(p + vel[i] * dt, lo, hi)
        pos[i] = p

    yaw = np.arctan2(vel[:, 1], vel[:, 0])
    track = PoseTrack(
        times=np.arange(frames) / rate,
        tx_pos=pos,
        tx_quat=yaw_quaternion(yaw),
        rx_pos=np.tile(room.center, (frames, 1)),
        rx_quat=yaw_quaternion(np.zeros(frames)),
    )
    return track


def _pose_at_audio_rate(track: PoseTrack, length: int, sample_rate: int) -> np.ndarray:
    from .dsp import resample_condition
    return resample_condition(track, length, sample_rate)


def _windowed_sinc_read(x: np.ndarray, read_pos: np.ndarray) -> np.ndarray:
    """Fractional-delay read of x at real positions (windowed-sinc interpolation)."""
    n = x.shape[0]
    taps = np.arange(-SINC_HALF_TAPS + 1, SINC_HALF_TAPS + 1)
    base = np.floor(read_pos).astype(np.int64)
    frac = read_pos - base
    idx = base[:, None] + taps[None, :]
    rel = frac[:, None] - taps[None, :].astype(np.float64)
    win = 0.5 + 0.5 * np.cos(np.pi * rel / SINC_HALF_TAPS)
    weights = np.sinc(rel) * np.where(np.abs(rel) <= SINC_HALF_TAPS, win, 0.0)
    valid = (idx >= 0) & (idx < n)
    gathered = np.where(valid, x[np.clip(idx, 0, n - 1)], 0.0)
    return np.sum(gathered * weights, axis=1)


def reverb_impulse_tail(rt60: float, sample_rate: int, rng: np.random.Generator,
                        tail_gain: float = 0.25) -> np.ndarray:
    """Seeded-noise tail whose energy envelope decays 60 dB at rt60 seconds."""
    if rt60 <= 0:
        return np.zeros(0)
    length = int(round(1.3 * rt60 * sample_rate))
    t = np.arange(1, length + 1, dtype=np.float64)
    envelope = 10.0 ** (-3.0 * t / (rt60 * sample_rate))
    return tail_gain * rng.standard_normal(length) * envelope


def spatialize_oracle(x: np.ndarray, track: PoseTrack, room: RoomSpec,
                      sample_rate: int, seed: int = 0) -> np.ndarray:
    """Analytic binaural rendering of mono x -> [2, T].

    Per ear: fractional delay distance/c, gain 1/max(distance, 0.1) with a
    -6 dB azimuth-weighted far-ear shadow, then a seeded exponential reverb
    tail and a white noise floor at the room's level.
    """
    x = np.asarray(x, dtype=np.float64)
    t_len = x.shape[0]
    if track.duration + 1.0 / POSE_RATE < t_len / sample_rate - 1e-9:
        raise ValueError(f"pose track covers {track.duration:.3f}s but audio lasts "
                         f"{t_len / sample_rate:.3f}s")
    rows = _pose_at_audio_rate(track, t_len, sample_rate)
    tx, rx, rxq = rows[:, 0:3], rows[:, 7:10], rows[:, 10:14]
    left_ear, right_ear = ear_positions(rx, rxq, EAR_OFFSET_M)

    fwd = quat_rotate(rxq, (1.0, 0.0, 0.0))
    lat = quat_rotate(rxq, (0.0, 1.0, 0.0))
    to_src = tx - rx
    dist_c = np.linalg.norm(to_src, axis=1)
    dir_src = to_src / np.maximum(dist_c, 1e-12)[:, None]
    sin_az = np.sum(dir_src * lat, axis=1)

    rng = np.random.default_rng(seed)
    out = np.zeros((2, t_len))
    samples = np.arange(t_len, dtype=np.float64)
    for ch, (ear, side) in enumerate(((left_ear, 1.0), (right_ear, -1.0))):
        dist = np.linalg.norm(tx - ear, axis=1)
        delay = dist / SPEED_OF_SOUND * sample_rate
        gain = 1.0 / np.maximum(dist, MIN_SOURCE_DISTANCE)
        shadow_db = -6.0 * (1.0 - side * sin_az) / 2.0
        gain = gain * 10.0 ** (shadow_db / 20.0)
        dry = _windowed_sinc_read(x, samples - delay) * gain
        if room.rt60 > 0:
            tail = reverb_impulse_tail(room.rt60, sample_rate, rng)
            dry = dry + fftconvolve(dry, tail)[:t_len]
        out[ch] = dry
    if np.isfinite(room.noise_floor_db):
        sigma = 10.0 ** (room.noise_floor_db / 20.0)
        out += sigma * rng.standard_normal(out.shape)
    return out


def synth_speech_like(rng: np.random.Generator, length: int, sample_rate: int,
                      peak: float = 0.2) -> np.ndarray:
    """A harmonic source with wandering pitch, syllabic envelope and breath noise."""
    t = np.arange(length) / sample_rate
    f0 = 140.0 * 2.0 ** np.cumsum(rng.normal(0.0, 0.003, length))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate
    sig = np.zeros(length)
    for h, amp in enumerate((1.0, 0.6, 0.35, 0.2), start=1):
        sig += amp * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syllable = 0.55 + 0.45 * np.sin(2.0 * np.pi * rng.uniform(2.0, 4.0) * t
                                    + rng.uniform(0, 2 * np.pi))
    sig = sig * syllable + 0.05 * rng.standard_normal(length)
    sig = sig / np.max(np.abs(sig))
    return (peak * sig).astype(np.float64)


# ------------------------------------------------------------------ dataset

@dataclass
class ClipRecord:
    clip_id: str
    mono: AudioBuffer
    binaural: AudioBuffer | None
    track: PoseTrack | None
    rt60: float
    noise_db: float
    seed: int


def write_pose_csv(path: str, track: PoseTrack) -> None:
    rows = track.rows()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(POSE_COLUMNS)
        for t, row in zip(track.times, rows):
            writer.writerow([f"{t:.10g}"] + [f"{v:.10g}" for v in row])


def read_pose_csv(path: str) -> PoseTrack:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty pose file")
        if header != POSE_COLUMNS:
            raise DatasetError(f"{path}: unexpected pose header {header}")
        values = []
        for i, row in enumerate(reader, start=2):
            if len(row) != len(POSE_COLUMNS):
                raise DatasetError(f"{path}: line {i} has {len(row)} fields, "
                                   f"expected {len(POSE_COLUMNS)}")
            try:
                values.append([float(v) for v in row])
            except ValueError as e:
                raise DatasetError(f"{path}: line {i}: {e}") from None
    arr = np.asarray(values)
    if arr.size == 0:
        raise DatasetError(f"{path}: no pose rows")
    return PoseTrack(times=arr[:, 0], tx_pos=arr[:, 1:4], tx_quat=arr[:, 4:8],
                     rx_pos=arr[:, 8:11], rx_quat=arr[:, 11:15])


def write_dataset(records: list[ClipRecord], out_dir: str) -> str:
    """Write clips + poses + manifest under out_dir; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in records:
            mono_name = f"{rec.clip_id}_mono.wav"
            bin_name = f"{rec.clip_id}_binaural.wav" if rec.binaural is not None else ""
            pose_name = f"{rec.clip_id}_pose.csv" if rec.track is not None else ""
            write_wav(os.path.join(out_dir, mono_name), rec.mono)
            if bin_name:
                write_wav(os.path.join(out_dir, bin_name), rec.binaural)
            if pose_name:
                write_pose_csv(os.path.join(out_dir, pose_name), rec.track)
            writer.writerow([rec.clip_id, mono_name, bin_name, pose_name,
                             f"{rec.rt60:.10g}", f"{rec.noise_db:.10g}", rec.seed])
    return manifest


def read_dataset(data_dir: str) -> list[ClipRecord]:
    manifest = os.path.join(data_dir, "manifest.csv")
    if not os.path.exists(manifest):
        raise DatasetError(f"no manifest.csv in {data_dir}")
    records = []
    with open(manifest, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_COLUMNS:
            raise DatasetError(f"{manifest}: unexpected header {header}")
        for i, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise DatasetError(f"{manifest}: line {i} has {len(row)} fields")
            clip_id, mono_name, bin_name, pose_name, rt60, noise_db, seed = row
            records.append(ClipRecord(
                clip_id=clip_id,
                mono=read_wav(os.path.join(data_dir, mono_name)),
                binaural=read_wav(os.path.join(data_dir, bin_name)) if bin_name else None,
                track=read_pose_csv(os.path.join(data_dir, pose_name)) if pose_name else None,
                rt60=float(rt60),
                noise_db=float(noise_db),
                seed=int(seed),
            ))
    return records


def synth_dataset(room: RoomSpec, hours: float, seed: int, sample_rate: int,
                  clip_seconds: float = 2.0, source_peak: float = 0.2) -> list[ClipRecord]:
    """Generate aligned mono/binaural/pose clips covering the requested hours."""
    total = max(1, int(round(hours * 3600.0 / clip_seconds)))
    records = []
    for i in range(total):
        clip_seed = seed * 100003 + i
        rng = np.random.default_rng(clip_seed)
        length = int(round(clip_seconds * sample_rate))
        x = synth_speech_like(rng, length, sample_rate, peak=source_peak)
        track = gen_trajectory(room, clip_seconds + 2.0 / POSE_RATE, seed=clip_seed + 1)
        y = spatialize_oracle(x, track, room, sample_rate, seed=clip_seed + 2)
        records.append(ClipRecord(
            clip_id=f"clip{i:05d}",
            mono=AudioBuffer(x.astype(np.float32), sample_rate),
            binaural=AudioBuffer(y.astype(np.float32), sample_rate),
            track=track,
            rt60=room.rt60,
            noise_db=room.noise_floor_db,
            seed=clip_seed + 2,
        ))
    return records
