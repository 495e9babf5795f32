"""Semantic greyscale JPEG streaming for low-bandwidth teleoperation.

Detected people, bicycles and vehicles are stamped into a greyscale frame as
reserved shades above a compressed background range, JPEG-coded to fit a
per-frame byte budget, and recovered at the receiver by shade band.
"""

from .codec import (
    BudgetUnattainable,
    CodecError,
    DecodedView,
    EncodedFrame,
    JpegDecodeError,
    JpegFormatError,
    RateBudget,
    decode,
    encode,
    mask_iou,
    round_trip_iou,
)
from .frame import (
    ClassId,
    ClassMask,
    GreyFrame,
    PaletteError,
    SemanticFrame,
    ShadePalette,
    default_palette,
    load_palette,
    save_palette,
    validate_palette,
)
from .netsim import LinkProfile, Proxy, load_profile, saturation_sweep, simulate
from .sources import InferenceDelay, MaskSourceConfig, make_source
from .transport import Reassembler, Receiver, WirePacket, control_echo, fragment, send_stream

__version__ = "0.1.0"

__all__ = [
    "BudgetUnattainable", "CodecError", "DecodedView", "EncodedFrame", "JpegDecodeError",
    "JpegFormatError", "RateBudget", "decode", "encode", "mask_iou", "round_trip_iou",
    "ClassId", "ClassMask", "GreyFrame", "PaletteError", "SemanticFrame", "ShadePalette",
    "default_palette", "load_palette", "save_palette", "validate_palette",
    "LinkProfile", "Proxy", "load_profile", "saturation_sweep", "simulate",
    "InferenceDelay", "MaskSourceConfig", "make_source",
    "Reassembler", "Receiver", "WirePacket", "control_echo", "fragment", "send_stream",
]
