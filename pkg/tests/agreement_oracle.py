"""Brute-force recounts used as oracles for the agreement statistics."""

import random
from fractions import Fraction


def brute_overlap(flags: dict, universe: set) -> dict:
    out = {}
    for a in flags:
        out[a] = {}
        for b in flags:
            both = only_a = 0
            for skill in universe:
                if skill in flags[a]:
                    only_a += 1
                    if skill in flags[b]:
                        both += 1
            out[a][b] = Fraction(both, only_a) if only_a else None
    return out


def brute_histogram(flags: dict, universe: set) -> dict:
    hist = {k: 0 for k in range(1, len(flags) + 1)}
    for skill in universe:
        k = sum(1 for s in flags.values() if skill in s)
        if k:
            hist[k] += 1
    return hist


def random_instance(rnd: random.Random, max_scanners=5, max_skills=1000):
    n = rnd.randint(1, max_scanners)
    m = rnd.randint(0, max_skills)
    skills = [f"d{i}" for i in range(m)]
    universe = {s for s in skills if rnd.random() < 0.9}
    flags = {}
    for j in range(n):
        rate = rnd.choice([0.0, 0.05, 0.2, 0.5])
        flags[f"s{j}"] = {s for s in skills if rnd.random() < rate}
    return flags, universe, skills


def generate_repo_corpus(rnd: random.Random, repos=400, skill_rate=0.19):
    """digest -> flagged and digest -> {repo}; every repo holds 1-8 skills."""
    skill_flags, mapping = {}, {}
    for r in range(repos):
        for k in range(rnd.randint(1, 8)):
            d = f"r{r}s{k}"
            skill_flags[d] = rnd.random() < skill_rate
            mapping[d] = {f"repo{r}"}
    return skill_flags, mapping
