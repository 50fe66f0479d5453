"""Bone, velocity and acceleration streams derived from joint coordinates.

All functions take arrays laid out ``... x C x T x V`` (a single clip or a
batch) and return an array of the same shape.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .graph import HandGraph, build_hand_graph


class StreamKind(str, Enum):
    JOINT = "joint"
    BONE = "bone"
    VELOCITY = "velocity"
    ACCELERATION = "acceleration"


def _check(joints, min_frames=1):
    joints = np.asarray(joints, dtype=float)
    if joints.ndim < 3:
        raise ValueError(f"expected ... x C x T x V, got shape {joints.shape}")
    if joints.shape[-2] < min_frames:
        raise ValueError(f"need at least {min_frames} frames, got {joints.shape[-2]}")
    return joints


def derive_bone(joints, graph: HandGraph | None = None):
    """Vector from each joint's parent to the joint; the wrist bone is zero."""
    graph = graph or build_hand_graph()
    joints = _check(joints)
    if joints.shape[-1] != graph.vertex_count:
        raise ValueError(f"joint array has {joints.shape[-1]} vertices, graph has {graph.vertex_count}")
    return joints - joints[..., list(graph.parent_of)]


def derive_velocity(joints):
    """Forward difference along time; the last frame is zero."""
    joints = _check(joints, 2)
    out = np.zeros_like(joints)
    out[..., :-1, :] = joints[..., 1:, :] - joints[..., :-1, :]
    return out


def derive_acceleration(joints):
    """Central second difference along time; first and last frames are zero."""
    joints = _check(joints, 3)
    out = np.zeros_like(joints)
    out[..., 1:-1, :] = joints[..., 2:, :] - 2 * joints[..., 1:-1, :] + joints[..., :-2, :]
    return out


def derive_stream(joints, kind, graph: HandGraph | None = None):
    kind = StreamKind(kind)
    if kind is StreamKind.JOINT:
        return _check(joints).copy()
    if kind is StreamKind.BONE:
        return derive_bone(joints, graph)
    if kind is StreamKind.VELOCITY:
        return derive_velocity(joints)
    return derive_acceleration(joints)
