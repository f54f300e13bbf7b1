"""
File codecs for textures, masks, normal maps and IUV maps.

Textures, masks and normals are 8-bit PNG, values mapped linearly to [0,1].
IUV maps are 16-bit 3-channel PNG stored in RGB order:
    R = part index (0 = background, 1..24), G = round(u * 65535), B = round(v * 65535).
"""

import os, cv2
import numpy as np

from modules.types import TextureMap, Mask, NormalMap, FixtureError, InvalidInputError
from modules.uvspace import IUVMap


UV_SCALE = 65535.0


def _imread(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise FixtureError(f"File not found: {path}")
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise FixtureError(f"Unreadable image: {path}")
    return data


def _imwrite(path: str, data: np.ndarray):
    dirpath = os.path.dirname(path)
    if dirpath:
        os.makedirs(dirpath, exist_ok=True)
    if not cv2.imwrite(path, data):
        raise IOError(f"Failed to write image: {path}")


def _to_rgb(data: np.ndarray) -> np.ndarray:
    if data.ndim == 2:
        return np.repeat(data[..., None], 3, axis=2)
    return cv2.cvtColor(data[..., :3], cv2.COLOR_BGR2RGB)


def _to_uint8(array: np.ndarray) -> np.ndarray:
    return np.round(np.clip(array, 0.0, 1.0) * 255.0).astype(np.uint8)


def decode_texture(data: np.ndarray) -> TextureMap:
    return (_to_rgb(data).astype(np.float32) / 255.0)


def decode_mask(data: np.ndarray) -> Mask:
    if data.ndim == 3:
        data = data[..., 0]
    return data.astype(np.float32) / 255.0


def read_texture(path: str) -> TextureMap:
    return decode_texture(_imread(path))


def write_texture(path: str, texture: TextureMap):
    _imwrite(path, cv2.cvtColor(_to_uint8(texture), cv2.COLOR_RGB2BGR))


def read_mask(path: str) -> Mask:
    return decode_mask(_imread(path))


def write_mask(path: str, mask: Mask):
    if mask.ndim == 3:
        mask = mask[..., 0]
    _imwrite(path, _to_uint8(mask))


# Normals share the texture codec: a unit vector n is stored as (n + 1) / 2.
read_normal = read_texture
write_normal = write_texture


def read_iuv(path: str) -> IUVMap:
    return decode_iuv(_imread(path))


def write_iuv(path: str, iuv: IUVMap):
    rgb = np.stack(
        [
            iuv.parts.astype(np.uint16),
            np.round(np.clip(iuv.u, 0.0, 1.0) * UV_SCALE).astype(np.uint16),
            np.round(np.clip(iuv.v, 0.0, 1.0) * UV_SCALE).astype(np.uint16),
        ],
        axis=-1,
    )
    _imwrite(path, cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))


def decode_upload(content: bytes) -> np.ndarray:
    """Decode an uploaded image (any format OpenCV reads) without changing its depth."""
    data = cv2.imdecode(np.frombuffer(content, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise InvalidInputError("Uploaded file is not a readable image.")
    return data


def decode_iuv(data: np.ndarray) -> IUVMap:
    if data.ndim != 3 or data.dtype != np.uint16:
        raise InvalidInputError("IUV image must be 16-bit with 3 channels.")
    rgb = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return IUVMap(
        parts=rgb[..., 0].astype(np.int64),
        u=rgb[..., 1].astype(np.float32) / UV_SCALE,
        v=rgb[..., 2].astype(np.float32) / UV_SCALE,
    )


def encode_png(texture: np.ndarray) -> bytes:
    if texture.ndim == 3:
        data = cv2.cvtColor(_to_uint8(texture), cv2.COLOR_RGB2BGR)
    else:
        data = _to_uint8(texture)
    ok, buffer = cv2.imencode(".png", data)
    if not ok:
        raise IOError("PNG encoding failed.")
    return buffer.tobytes()
