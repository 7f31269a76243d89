"""
Run profiles: YAML presets validated by the serializers in core.serializers.

A profile may name another preset under `extends`; its mappings are merged
over the parent's key by key.
"""
import copy
import hashlib
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass

import yaml
from django.conf import settings

from .exceptions import ProfileError
from .serializers import ProfileSerializer

logger = logging.getLogger(__name__)

MAX_EXTENDS_DEPTH = 8


@dataclass(frozen=True)
class Profile:
    name: str
    data: dict
    hash: str
    source: str

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)


def deep_merge(base: Mapping, override: Mapping) -> dict:
    merged = copy.deepcopy(dict(base))
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def plain(value):
    """OrderedDicts and tuples from validation -> plain JSON types."""
    if isinstance(value, Mapping):
        return {str(key): plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [plain(item) for item in value]
    return value


def profile_hash(data: Mapping) -> str:
    canonical = json.dumps(plain(data), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def preset_names():
    directory = settings.NSTEP_PROFILE_DIR
    if not os.path.isdir(directory):
        return []
    return sorted(name[:-5] for name in os.listdir(directory) if name.endswith('.yaml'))


def locate(name_or_path: str) -> str:
    if os.path.isfile(name_or_path):
        return name_or_path
    candidate = os.path.join(settings.NSTEP_PROFILE_DIR, f"{name_or_path}.yaml")
    if os.path.isfile(candidate):
        return candidate
    raise ProfileError("profile not found", profile=name_or_path, presets=",".join(preset_names()))


def _read(path: str) -> dict:
    try:
        with open(path, encoding='utf-8') as handle:
            data = yaml.safe_load(handle) or {}
    except yaml.YAMLError as e:
        raise ProfileError("profile is not valid YAML", path=path, error=str(e))
    if not isinstance(data, Mapping):
        raise ProfileError("profile must be a mapping", path=path)
    return dict(data)


def resolve_raw(name_or_path: str, depth: int = 0) -> dict:
    if depth > MAX_EXTENDS_DEPTH:
        raise ProfileError("profile extends chain is too deep", profile=name_or_path)
    data = _read(locate(name_or_path))
    parent = data.pop('extends', None)
    if parent is None:
        return data
    return deep_merge(resolve_raw(parent, depth + 1), data)


def validate_profile(raw: Mapping, source: str = '<memory>') -> Profile:
    serializer = ProfileSerializer(data=raw)
    if not serializer.is_valid():
        logger.error(f"Profile {source} failed validation: {serializer.errors}")
        raise ProfileError("profile failed schema validation", source=source,
                           errors=json.dumps(plain(serializer.errors), sort_keys=True))
    data = plain(serializer.validated_data)
    return Profile(name=data['name'], data=data, hash=profile_hash(data), source=source)


def load_profile(name_or_path: str = None, overrides: Mapping = None) -> Profile:
    """Load a preset name or a YAML path, apply `overrides` and validate."""
    name_or_path = name_or_path or settings.NSTEP_DEFAULT_PROFILE
    raw = resolve_raw(name_or_path)
    if overrides:
        raw = deep_merge(raw, overrides)
    profile = validate_profile(raw, source=name_or_path)
    logger.info(f"Loaded profile {profile.name} ({profile.hash[:12]}) from {name_or_path}")
    return profile
