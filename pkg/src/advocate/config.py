"""Operator configuration file (JSON)."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .collect import SourceSpec
from .errors import InvalidConfig
from .identity import InstanceConfig

DEFAULT_LISTEN = "127.0.0.1:8470"


def parse_listen(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not host or not port.isdigit() or not 0 <= int(port) < 65536:
        raise InvalidConfig(f"listen address {text!r} is not host:port")
    return host, int(port)


@dataclass
class Config:
    home: Path
    instance: InstanceConfig
    sources: list[SourceSpec] = field(default_factory=list)
    anchor_flush_interval_s: int = 60
    api_listen: str = DEFAULT_LISTEN
    peers: list[str] = field(default_factory=list)
    anchor_granularity: str = "kind"
    anchor_kinds: list[str] | None = None

    def validate(self) -> None:
        self.instance.validate()
        parse_listen(self.api_listen)
        if type(self.anchor_flush_interval_s) is not int or self.anchor_flush_interval_s <= 0:
            raise InvalidConfig("anchor_flush_interval_s must be a positive integer")
        if self.anchor_granularity not in ("kind", "source"):
            raise InvalidConfig("anchor_granularity must be 'kind' or 'source'")
        for spec in self.sources:
            spec.validate()

    @classmethod
    def from_json(cls, data: dict, *, home: str | os.PathLike[str] | None = None) -> Config:
        if not isinstance(data, dict) or "instance" not in data:
            raise InvalidConfig("config must be an object with an 'instance' section")
        home = home or data.get("home")
        if not home:
            raise InvalidConfig("config does not name a home directory")
        config = cls(
            home=Path(home),
            instance=InstanceConfig.from_json(data["instance"]),
            sources=[SourceSpec.from_json(s) for s in data.get("sources", [])],
            anchor_flush_interval_s=data.get("anchor_flush_interval_s", 60),
            api_listen=data.get("api_listen", DEFAULT_LISTEN),
            peers=list(data.get("peers", [])),
            anchor_granularity=data.get("anchor_granularity", "kind"),
            anchor_kinds=data.get("anchor_kinds"),
        )
        config.validate()
        return config

    def to_json(self) -> dict:
        data = {
            "home": str(self.home),
            "instance": self.instance.to_json(),
            "sources": [s.to_json() for s in self.sources],
            "anchor_flush_interval_s": self.anchor_flush_interval_s,
            "api_listen": self.api_listen,
            "peers": list(self.peers),
            "anchor_granularity": self.anchor_granularity,
        }
        if self.anchor_kinds is not None:
            data["anchor_kinds"] = list(self.anchor_kinds)
        return data


def load_config(path: str | os.PathLike[str], *, home: str | os.PathLike[str] | None = None) -> Config:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfig(f"no config file at {path}") from None
    except ValueError as exc:
        raise InvalidConfig(f"{path}: {exc}") from None
    return Config.from_json(data, home=home)
