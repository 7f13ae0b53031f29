"""envfuzz: record a program's environment interactions at a syscall-like
boundary, then fuzz them under replay with divergence handling."""

from .engine import CampaignConfig, CampaignReport, fuzz_campaign, replay_spine, triage
from .recorder import EnvScript, default_env_script, record
from .targets import bundled_target
from .trace import (
    Record,
    Recording,
    SyscallClass,
    classify,
    decode_recording,
    encode_recording,
    import_text_trace,
)

__all__ = [
    "CampaignConfig",
    "CampaignReport",
    "EnvScript",
    "Record",
    "Recording",
    "SyscallClass",
    "bundled_target",
    "classify",
    "decode_recording",
    "default_env_script",
    "encode_recording",
    "fuzz_campaign",
    "import_text_trace",
    "record",
    "replay_spine",
    "triage",
]
