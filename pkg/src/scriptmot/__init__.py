"""Structured multi-shot scripts, interleaved text-image layouts, attention
masks and a tiny two-expert transformer trained with next-token prediction
and rectified flow."""

from .autograd import Tape, Tensor, backward, grad_check, no_record
from .layout import Keyframe, LayoutConfig, Role, SequenceLayout, Vocabulary, layout_interleaved, layout_text
from .mask import AttentionMask, compile_mask, oracle_mask
from .model import MoTConfig, forward, init_model, load_checkpoint, save_checkpoint
from .script import Diagnostic, Script, ScriptError, parse_script, serialize_script

__all__ = [
    "AttentionMask",
    "Diagnostic",
    "Keyframe",
    "LayoutConfig",
    "MoTConfig",
    "Role",
    "Script",
    "ScriptError",
    "SequenceLayout",
    "Tape",
    "Tensor",
    "Vocabulary",
    "backward",
    "compile_mask",
    "forward",
    "grad_check",
    "init_model",
    "layout_interleaved",
    "layout_text",
    "load_checkpoint",
    "no_record",
    "oracle_mask",
    "parse_script",
    "save_checkpoint",
    "serialize_script",
]
