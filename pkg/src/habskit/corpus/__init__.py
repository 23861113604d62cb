"""Bundled example programs used by the test suite and demos."""

from __future__ import annotations

from importlib import resources

from .. import ast as A
from ..parser import parse_program

NAMES = (
    "room_faulty",
    "room_fixed",
    "tank",
    "bball",
    "ctank",
    "ctank_treq",
    "cloud",
    "ctrl_task_loop",
)


def corpus_source(name: str) -> str:
    return resources.files(__package__).joinpath(f"{name}.habs").read_text(encoding="utf-8")


def load(name: str) -> A.Program:
    return parse_program(corpus_source(name), f"{name}.habs")
