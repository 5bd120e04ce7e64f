"""
Démonstrations : structure en mémoire + fichier binaire (en-tête JSON + blocs de frames).
"""
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from src.pcgeom.cloud import PointCloud
from src.simbench.world import SimError

MAGIC = b"SFDM"
FILE_VERSION = 1
_HAS_PROPRIO = 1
_HAS_ACTION = 2


@dataclass(eq=False)
class Frame:
    cloud: PointCloud
    mask: np.ndarray            # N booléens, True = point de l'effecteur
    gripper: np.ndarray         # position de la pince (ou du centre de la main)
    proprio: np.ndarray = None  # g, 3 x 3 (robot seulement)
    action: np.ndarray = None   # (dx, dy, dz, doigts) (robot seulement)


@dataclass(eq=False)
class Demonstration:
    task_id: str
    embodiment: str
    seed: int
    noise_seed: int
    frames: list = field(default_factory=list)
    success: bool = False
    stage_reached: int = 0

    @property
    def episode_id(self):
        return f"{self.task_id}_{self.embodiment}_{self.seed}_{self.noise_seed}"

    @property
    def num_frames(self):
        return len(self.frames)

    @property
    def has_actions(self):
        return bool(self.frames) and all(f.action is not None and f.proprio is not None for f in self.frames)

    def tracks(self):
        """Suivi oracle : positions de chaque point de la scène à chaque frame (F x N x 3)."""
        return np.stack([f.cloud.positions for f in self.frames])

    def window_positions(self, start, horizon):
        """Trajectoires N x T x 3 à partir de la frame `start`, complétées par la dernière frame."""
        if not 0 <= start < self.num_frames:
            raise ValueError(f"frame de départ hors limites : {start}")
        idx = np.minimum(np.arange(start, start + horizon), self.num_frames - 1)
        return np.stack([self.frames[i].cloud.positions for i in idx], axis=1)

    def window_starts(self, stride):
        return list(range(0, self.num_frames, stride))

    def actions(self):
        return np.stack([f.action for f in self.frames])


def _header(demo):
    return {
        "task_id": demo.task_id,
        "embodiment": demo.embodiment,
        "seed": int(demo.seed),
        "noise_seed": int(demo.noise_seed),
        "frame_count": demo.num_frames,
        "success": bool(demo.success),
        "stage_reached": int(demo.stage_reached),
    }


def encode_demonstration(demo):
    header = json.dumps(_header(demo), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<HI", FILE_VERSION, len(header)), header]
    for frame in demo.frames:
        rows = frame.cloud.as_rows()
        flags = (_HAS_PROPRIO if frame.proprio is not None else 0) | (_HAS_ACTION if frame.action is not None else 0)
        chunks.append(struct.pack("<I", len(rows)))
        chunks.append(rows.astype("<f8").tobytes())
        chunks.append(np.asarray(frame.mask, dtype=np.uint8).tobytes())
        chunks.append(np.asarray(frame.gripper, dtype="<f8").tobytes())
        chunks.append(struct.pack("<B", flags))
        if frame.proprio is not None:
            chunks.append(np.asarray(frame.proprio, dtype="<f8").reshape(9).tobytes())
        if frame.action is not None:
            chunks.append(np.asarray(frame.action, dtype="<f8").reshape(4).tobytes())
    return b"".join(chunks)


def decode_demonstration(data):
    if data[:4] != MAGIC:
        raise SimError("fichier de démonstration invalide (signature)")
    version, header_len = struct.unpack_from("<HI", data, 4)
    if version != FILE_VERSION:
        raise SimError(f"version de fichier non supportée : {version}")
    offset = 10
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len

    def _take(dtype, count):
        nonlocal offset
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += arr.nbytes
        return arr.copy()

    frames = []
    for _ in range(header["frame_count"]):
        (n,) = struct.unpack_from("<I", data, offset)
        offset += 4
        rows = _take("<f8", n * 7).reshape(n, 7)
        mask = _take(np.uint8, n).astype(bool)
        gripper = _take("<f8", 3)
        (flags,) = struct.unpack_from("<B", data, offset)
        offset += 1
        proprio = _take("<f8", 9).reshape(3, 3) if flags & _HAS_PROPRIO else None
        action = _take("<f8", 4) if flags & _HAS_ACTION else None
        frames.append(Frame(PointCloud.from_rows(rows), mask, gripper, proprio, action))
    if offset != len(data):
        raise SimError(f"fichier de démonstration tronqué ou corrompu ({len(data) - offset} octets en trop)")
    return Demonstration(
        task_id=header["task_id"],
        embodiment=header["embodiment"],
        seed=header["seed"],
        noise_seed=header["noise_seed"],
        frames=frames,
        success=header["success"],
        stage_reached=header["stage_reached"],
    )


def save_demonstration(path, demo):
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_demonstration(demo))
    return path


def load_demonstration(path):
    with open(path, "rb") as f:
        return decode_demonstration(f.read())
