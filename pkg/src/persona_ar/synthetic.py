"""Deterministic synthetic persona dialogues for tests and demos.

Responses depend on the last question and on the responder's profile, so
a model that uses the persona path can fit them.
"""

from __future__ import annotations

import numpy as np

from .data import PersonaProfile, Session, Turn

GENDERS = ("男", "女")
CITIES = ("北京", "上海", "广州", "深圳", "成都", "杭州", "南京", "西安")
INTERESTS = ("音乐", "电影", "旅游", "篮球", "读书", "美食", "游戏", "摄影")

CHATTER = (
    "你好呀", "今天天气不错", "最近在忙什么呢", "哈哈哈好的",
    "周末一起出去玩吧，好久没有见面了，想你了", "我刚下班回家",
    "晚饭吃了吗", "嗯嗯", "真的吗太好了", "好久不见了朋友们",
)

QUESTIONS = {
    "address": ("你住在哪里", "你在哪个城市"),
    "interests": ("你喜欢什么", "你平时有什么爱好"),
    "gender": ("你是男生还是女生", "你是男的吗"),
}


def _answer(kind: str, profile: PersonaProfile, rng: np.random.Generator) -> str:
    if kind == "address":
        return f"我住在{profile.address}"
    if kind == "interests":
        return f"我喜欢{profile.interests[rng.integers(len(profile.interests))]}"
    return "我是男生" if profile.gender == "男" else "我是女生"


def random_profile(rng: np.random.Generator) -> PersonaProfile:
    k = int(rng.integers(1, 3))
    interests = tuple(rng.choice(INTERESTS, size=k, replace=False).tolist())
    return PersonaProfile(str(rng.choice(GENDERS)), str(rng.choice(CITIES)), interests)


def make_session(rng: np.random.Generator) -> Session:
    profiles = {"A": random_profile(rng), "B": random_profile(rng)}
    n_chatter = int(rng.integers(0, 9))
    speakers = ["A", "B"]
    turns = [Turn(speakers[i % 2], str(rng.choice(CHATTER))) for i in range(n_chatter)]
    kind = str(rng.choice(list(QUESTIONS)))
    asker = speakers[n_chatter % 2]
    responder = speakers[(n_chatter + 1) % 2]
    turns.append(Turn(asker, str(rng.choice(QUESTIONS[kind]))))
    return Session(tuple(turns), profiles, responder, _answer(kind, profiles[responder], rng))


def make_sessions(n: int, seed: int = 0) -> list[Session]:
    rng = np.random.default_rng(seed)
    return [make_session(rng) for _ in range(n)]
