"""Fixed layout encodings for box pairs and human pose.

Box-pair features (21, in this order), for a human box h and object box o in
a W x H image::

    0-5    h: w/W, h/H, cx/W, cy/H, w/h, area/(W*H)
    6-11   o: same six terms
    12-15  (cx_o-cx_h)/w_h, (cy_o-cy_h)/h_h, area_o/area_h, iou
    16-20  w_o/w_h, h_o/h_h, inter/area_h, inter/area_o, center_dist/sqrt(W*H)

Pose features: 18 x (x, y, conf) normalized to the human box (54) and
18 x (x1_o-kx, y1_o-ky, x2_o-kx, y2_o-ky, conf) scaled by the human box
size (90). Undetected keypoints (confidence 0) and missing skeletons encode
as zeros.
"""
from __future__ import annotations

import numpy as np

from .dataio import NUM_KEYPOINTS, PoseSkeleton
from .geometry import Box

BOX_RAW_DIM = 21
POSE_ABS_DIM = NUM_KEYPOINTS * 3
POSE_REL_DIM = NUM_KEYPOINTS * 5
LOG_EPS = 1e-6


def box_aug_dim(num_objects: int, one_hot: bool = True) -> int:
    return 2 * BOX_RAW_DIM + (num_objects if one_hot else 0)


def pose_aug_dim(num_objects: int, one_hot: bool = True) -> int:
    return 2 * (POSE_ABS_DIM + POSE_REL_DIM) + (num_objects if one_hot else 0)


def _split(b):
    return b[:, 0], b[:, 1], b[:, 2], b[:, 3]


def encode_box_pairs(human: np.ndarray, obj: np.ndarray, width, height) -> np.ndarray:
    """Vectorized box-pair encoding: ``[P, 4]`` x ``[P, 4]`` -> ``[P, 21]``.

    ``width``/``height`` may be scalars or length-P arrays.
    """
    human = np.asarray(human, dtype=np.float64).reshape(-1, 4)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 4)
    W = np.broadcast_to(np.asarray(width, dtype=np.float64), (len(human),))
    H = np.broadcast_to(np.asarray(height, dtype=np.float64), (len(human),))
    hx1, hy1, hx2, hy2 = _split(human)
    ox1, oy1, ox2, oy2 = _split(obj)
    hw, hh = hx2 - hx1, hy2 - hy1
    ow, oh = ox2 - ox1, oy2 - oy1
    hcx, hcy = 0.5 * (hx1 + hx2), 0.5 * (hy1 + hy2)
    ocx, ocy = 0.5 * (ox1 + ox2), 0.5 * (oy1 + oy2)
    ha, oa = hw * hh, ow * oh
    iw = np.minimum(hx2, ox2) - np.maximum(hx1, ox1)
    ih = np.minimum(hy2, oy2) - np.maximum(hy1, oy1)
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    iou = inter / (ha + oa - inter)
    img_area = W * H
    dist = np.hypot(ocx - hcx, ocy - hcy)
    cols = [
        hw / W, hh / H, hcx / W, hcy / H, hw / hh, ha / img_area,
        ow / W, oh / H, ocx / W, ocy / H, ow / oh, oa / img_area,
        (ocx - hcx) / hw, (ocy - hcy) / hh, oa / ha, iou,
        ow / hw, oh / hh, inter / ha, inter / oa, dist / np.sqrt(img_area),
    ]
    return np.stack(cols, axis=1)


def encode_box_pair(human: Box, obj: Box, width: float, height: float) -> np.ndarray:
    return encode_box_pairs(np.array([human.to_list()]), np.array([obj.to_list()]), width, height)[0]


def encode_poses(keypoints: np.ndarray, has_pose: np.ndarray, human: np.ndarray,
                 obj: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pose encoding.

    Args:
      keypoints: ``[P, 18, 3]`` pixel keypoints (ignored where ``has_pose`` is False).
      has_pose: ``[P]`` bool.
      human, obj: ``[P, 4]`` boxes.

    Returns:
      ``([P, 54], [P, 90])`` absolute and relative features.
    """
    kp = np.asarray(keypoints, dtype=np.float64).reshape(-1, NUM_KEYPOINTS, 3)
    human = np.asarray(human, dtype=np.float64).reshape(-1, 4)
    obj = np.asarray(obj, dtype=np.float64).reshape(-1, 4)
    hw = (human[:, 2] - human[:, 0])[:, None]
    hh = (human[:, 3] - human[:, 1])[:, None]
    kx, ky, conf = kp[:, :, 0], kp[:, :, 1], kp[:, :, 2]
    visible = (conf > 0) & np.asarray(has_pose, dtype=bool)[:, None]
    absolute = np.stack([(kx - human[:, :1]) / hw, (ky - human[:, 1:2]) / hh, conf], axis=2)
    relative = np.stack([
        (obj[:, 0:1] - kx) / hw, (obj[:, 1:2] - ky) / hh,
        (obj[:, 2:3] - kx) / hw, (obj[:, 3:4] - ky) / hh, conf,
    ], axis=2)
    absolute = np.where(visible[:, :, None], absolute, 0.0)
    relative = np.where(visible[:, :, None], relative, 0.0)
    P = len(kp)
    return absolute.reshape(P, POSE_ABS_DIM), relative.reshape(P, POSE_REL_DIM)


def encode_pose(skeleton: PoseSkeleton | None, human: Box, obj: Box) -> tuple[np.ndarray, np.ndarray]:
    if skeleton is None:
        return np.zeros(POSE_ABS_DIM), np.zeros(POSE_REL_DIM)
    a, r = encode_poses(skeleton.keypoints[None], np.array([True]),
                        np.array([human.to_list()]), np.array([obj.to_list()]))
    return a[0], r[0]


def augment(raw: np.ndarray, objects, num_objects: int, one_hot: bool = True) -> np.ndarray:
    """``raw || log(|raw| + 1e-6) || one_hot(object)``, row-wise.

    ``raw`` may be a single vector (with a scalar object index) or ``[P, R]``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    raw2 = raw.reshape(1, -1) if single else raw
    parts = [raw2, np.log(np.abs(raw2) + LOG_EPS)]
    if one_hot:
        objs = np.atleast_1d(np.asarray(objects, dtype=np.int64))
        if np.any(objs < 0) or np.any(objs >= num_objects):
            raise IndexError("object index out of range for one-hot encoding")
        oh = np.zeros((len(raw2), num_objects))
        oh[np.arange(len(raw2)), objs] = 1.0
        parts.append(oh)
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out
