"""Synthetic aerial-ground cloth-changing tracklet benchmark.

Renders articulated stick figures on noisy backgrounds. Identity is carried by
persistent cues (clothing saturation/brightness, stripe texture, body geometry
from a 10-d shape latent, gait frequency) while clothing hue is re-drawn in
session 2, so hue alone cannot solve cross-session retrieval. The aerial
platform applies a top-down squash and a downscale-upscale blur.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import hsv_to_rgb

PLATFORMS = ("aerial", "ground")
SHAPE_DIM = 10
SIDECAR_NAME = "shape_latents.bin"

# person-space layout, fractions of frame height/width
_HEAD_TOP, _HEAD_BOT = 0.06, 0.19
_TORSO_TOP = 0.21
_TORSO_BOT = 0.58
_LEG_BOT = 0.95
_HEAD_W, _TORSO_W, _LEG_W = 0.30, 0.52, 0.16
_LEG_SEP, _LEG_SWING = 0.15, 0.15
_GAIT_BOB = 0.06  # vertical body displacement over the gait cycle
_AERIAL_SQUASH = 0.94
_AERIAL_WIDEN = 1.04
_SESSION2_GAIN = 0.96


class ManifestError(Exception):
    """Raised when a manifest or its shape sidecar cannot be parsed."""


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 32
    tracklets_per_cell: int = 6  # per (identity, platform, session)
    frames_per_tracklet: int = 8
    sessions: int = 2
    height: int = 56
    width: int = 28
    noise_std: float = 0.03  # luminance fraction
    blur_aerial: int = 2  # downscale factor for the aerial blur
    occlusion_prob: float = 0.12  # per-frame chance of an occluding block
    seed: int = 0

    def validate(self) -> None:
        if self.num_identities < 1:
            raise ValueError("num_identities must be >= 1")
        if self.tracklets_per_cell < 1:
            raise ValueError("tracklets_per_cell must be >= 1")
        if self.frames_per_tracklet < 1:
            raise ValueError("frames_per_tracklet must be >= 1")
        if self.sessions < 1:
            raise ValueError("sessions must be >= 1")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ValueError("noise_std must lie in [0, 1]")
        if self.blur_aerial < 1:
            raise ValueError("blur_aerial must be >= 1")
        if self.height % self.blur_aerial or self.width % self.blur_aerial:
            raise ValueError("blur_aerial must divide height and width")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must lie in [0, 1]")


@dataclass(frozen=True)
class IdentityProfile:
    identity: int
    hue: float  # clothing hue, session 1; also skin tone hue
    hue_session2: float  # clothing hue after the session-2 outfit change
    saturation: float
    value: float
    stripe_period: int
    stripe_contrast: float
    gait_freq: float  # leg-swing cycles per rendered tracklet
    beta: tuple[float, ...]  # 10-d shape latent driving body geometry


@dataclass(frozen=True)
class TrackletRecord:
    tracklet_id: str
    identity: int
    platform: str
    session: int
    frame_dir: str
    frames: tuple[str, ...]
    beta: tuple[float, ...]


def identity_profile(config: SynthConfig, identity: int) -> IdentityProfile:
    """Deterministic per-identity appearance/shape assignment.

    Session-1 hues are spread on the circle with at least 1/(2Y) pairwise
    separation; the session-2 hue is an independent large re-coloring.
    """
    if not 1 <= identity <= config.num_identities:
        raise ValueError(f"identity {identity} outside 1..{config.num_identities}")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 101, identity]))
    y = config.num_identities
    hue = ((identity - 1) + 0.25 + 0.5 * rng.random()) / y % 1.0
    hue2 = (hue + 0.25 + 0.5 * rng.random()) % 1.0
    sat = 0.50 + 0.48 * rng.random()
    val = 0.45 + 0.50 * rng.random()
    period = int(rng.integers(4, 9))
    contrast = 0.10 + 0.18 * rng.random()
    # full cycles only: partial cycles leave a phase-dependent temporal mean
    gait = 1.0 + 2.6 * rng.random()
    beta = rng.standard_normal(SHAPE_DIM).astype(np.float32)
    return IdentityProfile(
        identity=identity,
        hue=float(hue),
        hue_session2=float(hue2),
        saturation=float(sat),
        value=float(val),
        stripe_period=period,
        stripe_contrast=float(contrast),
        gait_freq=float(gait),
        beta=tuple(float(b) for b in beta),
    )


def _band_mask(rows: np.ndarray, top: float, bot: float) -> np.ndarray:
    return (rows >= top) & (rows < bot)


def _column_mask(cols: np.ndarray, center: float, half_width: float) -> np.ndarray:
    return np.abs(cols - center) < half_width


def render_tracklet(
    config: SynthConfig,
    profile: IdentityProfile,
    platform: str,
    session: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Render one tracklet as a (T, H, W, 3) float32 array in [0, 1]."""
    if platform not in PLATFORMS:
        raise ValueError(f"unknown platform {platform!r}")
    h, w, t_len = config.height, config.width, config.frames_per_tracklet
    beta = np.asarray(profile.beta)

    # per-tracklet randomness: phase, framing, lighting, static background
    phase = rng.random()
    cx = 0.5 + 0.12 * (rng.random() - 0.5)
    gain = (1.0 if session == 1 else _SESSION2_GAIN) * rng.uniform(0.98, 1.02)
    bg_val = 0.28 + 0.08 * rng.random()
    bg_hue = rng.random()
    grad = 0.05 * np.linspace(-1.0, 1.0, h)[:, None]
    speckle = rng.uniform(-0.04, 0.04, size=(h, w))
    bg = hsv_to_rgb(
        np.stack(
            [
                np.full((h, w), bg_hue),
                np.full((h, w), 0.04),
                np.clip(bg_val + grad + speckle, 0.0, 1.0),
            ],
            axis=-1,
        )
    )

    aerial = platform == "aerial"
    squash = _AERIAL_SQUASH if aerial else 1.0
    widen = _AERIAL_WIDEN if aerial else 1.0

    # shape latent -> geometry scales
    torso_w = _TORSO_W * (1.0 + 0.50 * math.tanh(beta[0]))
    head_w = _HEAD_W * (1.0 + 0.45 * math.tanh(beta[1]))
    leg_w = _LEG_W * (1.0 + 0.45 * math.tanh(beta[2]))
    torso_bot = _TORSO_BOT + 0.07 * math.tanh(beta[4])
    bob_amp = _GAIT_BOB * (1.0 + 0.7 * math.tanh(beta[5]))
    swing_amp = _LEG_SWING * (1.0 + 0.6 * math.tanh(beta[6]))
    leg_top = torso_bot + 0.02
    leg_bot = _LEG_BOT - 0.04 * (1.0 - math.tanh(beta[3]))

    cloth_hue = profile.hue if session == 1 else profile.hue_session2
    pant_hue = (cloth_hue + 0.10) % 1.0
    skin = hsv_to_rgb(np.array([profile.hue, 0.08, 0.85]))

    rows = (np.arange(h)[:, None] + 0.5) / h
    cols = (np.arange(w)[None, :] + 0.5) / w

    frames = np.empty((t_len, h, w, 3), dtype=np.float32)
    for t in range(t_len):
        swing = math.sin(2.0 * math.pi * (profile.gait_freq * t / t_len + phase))
        wobble = math.cos(2.0 * math.pi * (profile.gait_freq * t / t_len + phase))
        # legs sway laterally as a pair: the time-mean smear hides the gait
        # frequency, only sub-tracklet windows resolve it
        sway = swing_amp * swing * widen
        sep = _LEG_SEP * widen
        lw = leg_w * (1.0 + 0.25 * wobble) * widen
        bob = bob_amp * (0.5 - 0.5 * math.cos(4.0 * math.pi * (profile.gait_freq * t / t_len + phase)))

        torso_rows = _band_mask(rows, (_TORSO_TOP + bob) * squash, (torso_bot + bob) * squash)
        head_rows = _band_mask(rows, (_HEAD_TOP + bob) * squash, (_HEAD_BOT + bob) * squash)
        leg_rows = _band_mask(rows, (leg_top + bob) * squash, (leg_bot + bob) * squash)

        # stripe texture: square wave over torso rows, identity-fixed period
        row_px = np.arange(h)[:, None]
        torso_top_px = int(round((_TORSO_TOP + bob) * squash * h))
        stripe_idx = (row_px - torso_top_px) // profile.stripe_period
        stripe = np.where(
            stripe_idx % 2 == 0, 1.0 + profile.stripe_contrast, 1.0 - profile.stripe_contrast
        )

        img = bg.copy()
        torso = torso_rows & _column_mask(cols, cx, torso_w * widen / 2.0)
        tv = np.clip(profile.value * stripe, 0.0, 1.0)
        torso_rgb = hsv_to_rgb(
            np.stack(
                [
                    np.full((h, 1), cloth_hue),
                    np.full((h, 1), profile.saturation),
                    tv,
                ],
                axis=-1,
            )
        )
        img = np.where(torso[..., None], torso_rgb, img)

        pants = hsv_to_rgb(np.array([pant_hue, profile.saturation * 0.85, profile.value * 0.80]))
        for side in (-1.0, 1.0):
            leg = leg_rows & _column_mask(cols, cx + side * sep + sway, lw / 2.0)
            img = np.where(leg[..., None], pants, img)

        head = head_rows & _column_mask(cols, cx, head_w * widen / 2.0)
        img = np.where(head[..., None], skin, img)

        img = img * gain
        if aerial and config.blur_aerial > 1:
            k = config.blur_aerial
            small = img.reshape(h // k, k, w // k, k, 3).mean(axis=(1, 3))
            img = np.repeat(np.repeat(small, k, axis=0), k, axis=1)
        if rng.random() < config.occlusion_prob:
            # detector misfire: a large flat block wipes out part of the frame
            bh = int(h * rng.uniform(0.3, 0.5))
            bw = int(w * rng.uniform(0.5, 0.9))
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            img[top : top + bh, left : left + bw] = rng.uniform(0.2, 0.6)
        img = img + rng.normal(0.0, config.noise_std, size=(h, w, 1))
        frames[t] = np.clip(img, 0.0, 1.0)
    return frames


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a float [0, 1] HxWx3 image as binary PPM (P6, maxval 255)."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be HxWx3")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into a float32 [0, 1] HxWx3 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ManifestError(f"{path}: not a binary PPM (P6) file")
    # header = three whitespace-separated fields after the magic
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ManifestError(f"{path}: truncated PPM header")
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ManifestError(f"{path}: unsupported PPM maxval {maxval}")
    expect = h * w * 3
    body = raw[pos : pos + expect]
    if len(body) != expect:
        raise ManifestError(f"{path}: PPM payload has {len(body)} bytes, expected {expect}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float32) / 255.0


def load_frames(record: TrackletRecord) -> np.ndarray:
    """Stack a record's frames into (T, H, W, 3) float32."""
    return np.stack([read_ppm(p) for p in record.frames])


def generate_dataset(config: SynthConfig, out_dir: str | Path) -> list[TrackletRecord]:
    """Render the full benchmark under out_dir and write its manifest."""
    config.validate()
    out = Path(out_dir)
    records: list[TrackletRecord] = []
    for identity in range(1, config.num_identities + 1):
        profile = identity_profile(config, identity)
        for p_idx, platform in enumerate(PLATFORMS):
            for session in range(1, config.sessions + 1):
                for k in range(config.tracklets_per_cell):
                    tid = f"id{identity:03d}_{platform}_s{session}_{k:02d}"
                    rng = np.random.default_rng(
                        np.random.SeedSequence([config.seed, 202, identity, p_idx, session, k])
                    )
                    frames = render_tracklet(config, profile, platform, session, rng)
                    frame_dir = out / "frames" / tid
                    paths = []
                    for t in range(frames.shape[0]):
                        p = frame_dir / f"frame_{t:04d}.ppm"
                        write_ppm(p, frames[t])
                        paths.append(str(p))
                    records.append(
                        TrackletRecord(
                            tracklet_id=tid,
                            identity=identity,
                            platform=platform,
                            session=session,
                            frame_dir=str(frame_dir),
                            frames=tuple(paths),
                            beta=profile.beta,
                        )
                    )
    write_manifest(records, out / "manifest.tsv")
    return records


def write_manifest(records: list[TrackletRecord], path: str | Path) -> None:
    """Write the TSV manifest plus the shape-latent sidecar.

    Columns: tracklet_id, identity, platform, session, frame_dir (relative to
    the manifest). The sidecar holds 10 little-endian float32 per identity, in
    sorted identity order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.parent
    lines = []
    betas: dict[int, tuple[float, ...]] = {}
    seen: set[str] = set()
    for rec in records:
        if rec.tracklet_id in seen:
            raise ManifestError(f"duplicate tracklet_id {rec.tracklet_id!r}")
        seen.add(rec.tracklet_id)
        prev = betas.setdefault(rec.identity, rec.beta)
        if prev != rec.beta:
            raise ManifestError(f"identity {rec.identity} has inconsistent shape latents")
        try:
            rel = Path(rec.frame_dir).relative_to(base)
        except ValueError:
            rel = Path(rec.frame_dir)
        lines.append(f"{rec.tracklet_id}\t{rec.identity}\t{rec.platform}\t{rec.session}\t{rel}")
    path.write_text("\n".join(lines) + ("\n" if lines else ""))
    if betas:
        with open(base / SIDECAR_NAME, "wb") as f:
            for identity in sorted(betas):
                f.write(struct.pack(f"<{SHAPE_DIM}f", *betas[identity]))


def read_manifest(path: str | Path) -> list[TrackletRecord]:
    """Parse a manifest and its sidecar back into records.

    Frame directories are resolved relative to the manifest; frames are the
    sorted *.ppm files inside each directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    base = path.parent
    rows: list[tuple[str, int, str, int, Path]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ManifestError(f"{path}:{lineno}: expected 5 tab-separated fields, got {len(parts)}")
        tid, id_s, platform, sess_s, rel = parts
        try:
            identity = int(id_s)
            session = int(sess_s)
        except ValueError as e:
            raise ManifestError(f"{path}:{lineno}: {e}") from None
        if identity < 1:
            raise ManifestError(f"{path}:{lineno}: identity must be positive, got {identity}")
        if platform not in PLATFORMS:
            raise ManifestError(f"{path}:{lineno}: unknown platform {platform!r}")
        if session < 1:
            raise ManifestError(f"{path}:{lineno}: session must be positive, got {session}")
        rows.append((tid, identity, platform, session, (base / rel).resolve()))
    if not rows:
        return []

    identities = sorted({r[1] for r in rows})
    sidecar = base / SIDECAR_NAME
    if not sidecar.is_file():
        raise ManifestError(f"shape-latent sidecar missing: {sidecar}")
    blob = sidecar.read_bytes()
    expect = len(identities) * SHAPE_DIM * 4
    if len(blob) != expect:
        raise ManifestError(f"{sidecar}: has {len(blob)} bytes, expected {expect} for {len(identities)} identities")
    betas = {
        identity: struct.unpack_from(f"<{SHAPE_DIM}f", blob, i * SHAPE_DIM * 4)
        for i, identity in enumerate(identities)
    }

    records = []
    seen: set[str] = set()
    for tid, identity, platform, session, frame_dir in rows:
        if tid in seen:
            raise ManifestError(f"{path}: duplicate tracklet_id {tid!r}")
        seen.add(tid)
        if not frame_dir.is_dir():
            raise ManifestError(f"{path}: frame directory missing for {tid!r}: {frame_dir}")
        frames = tuple(str(p) for p in sorted(frame_dir.glob("*.ppm")))
        if not frames:
            raise ManifestError(f"{path}: no .ppm frames in {frame_dir}")
        records.append(
            TrackletRecord(
                tracklet_id=tid,
                identity=identity,
                platform=platform,
                session=session,
                frame_dir=str(frame_dir),
                frames=frames,
                beta=tuple(float(b) for b in betas[identity]),
            )
        )
    return records


def dataset_checksum(records: list[TrackletRecord]) -> str:
    """SHA-256 over record metadata and frame bytes, for determinism checks."""
    digest = hashlib.sha256()
    for rec in records:
        digest.update(
            f"{rec.tracklet_id}|{rec.identity}|{rec.platform}|{rec.session}|{len(rec.frames)}".encode()
        )
        for frame in rec.frames:
            digest.update(Path(frame).read_bytes())
    return digest.hexdigest()
