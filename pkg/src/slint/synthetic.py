"""Seeded synthetic knowledge graphs with typed entities and latent structure."""

from __future__ import annotations

import random

from .data import KnowledgeGraph, Triple, Vocab

TYPE_SIZES = {"person": 90, "city": 50, "country": 10, "company": 30, "field": 20}


def make_synthetic_kg(seed: int = 0, n_triples: int = 1000, valid_frac: float = 0.1, test_frac: float = 0.1,
                      descriptions: bool = True) -> KnowledgeGraph:
    """Typed toy world (people, cities, countries, companies, fields).

    Entity names are single tokens, ``"<type><index>"``; relations respect fixed
    domain/range types and follow latent assignments (home city, employer,
    country) so that facts are partially predictable from one another.
    """
    rng = random.Random(seed)
    ents = {t: [f"{t}{i}" for i in range(n)] for t, n in TYPE_SIZES.items()}
    city_country = {c: rng.choice(ents["country"]) for c in ents["city"]}
    company_city = {c: rng.choice(ents["city"]) for c in ents["company"]}
    field_of_company = {c: rng.choice(ents["field"]) for c in ents["company"]}
    home = {p: rng.choice(ents["city"]) for p in ents["person"]}
    employer = {}
    for p in ents["person"]:
        local = [c for c in ents["company"] if city_country[company_city[c]] == city_country[home[p]]]
        employer[p] = rng.choice(local) if local and rng.random() < 0.8 else rng.choice(ents["company"])

    facts: set[tuple[str, str, str]] = set()
    for c, k in city_country.items():
        facts.add((c, "located in", k))
    for c, city in company_city.items():
        facts.add((c, "headquartered in", city))
        facts.add((c, "operates in", field_of_company[c]))
    for p in ents["person"]:
        facts.add((p, "born in", home[p]))
        facts.add((p, "citizen of", city_country[home[p]]))
        facts.add((p, "works for", employer[p]))
        if rng.random() < 0.7:
            facts.add((p, "studied", field_of_company[employer[p]]))
        if rng.random() < 0.6:
            same_country = [c for c in ents["city"] if city_country[c] == city_country[home[p]]]
            facts.add((p, "lives in", rng.choice(same_country)))

    people = ents["person"]
    attempts = 0
    while len(facts) < n_triples and attempts < 50 * n_triples:
        attempts += 1
        a, b = rng.sample(people, 2)
        if employer[a] == employer[b] or rng.random() < 0.15:
            facts.add((a, "colleague of", b))
        elif city_country[home[a]] == city_country[home[b]]:
            facts.add((a, "knows", b))

    ordered = sorted(facts)
    rng.shuffle(ordered)
    n_valid = int(valid_frac * len(ordered))
    n_test = int(test_frac * len(ordered))
    held = ordered[: n_valid + n_test]
    train = ordered[n_valid + n_test:]
    seen = {x for h, _, t in train for x in (h, t)}
    valid, test = [], []
    for f in held:
        # held-out facts must only mention entities seen in training
        if f[0] not in seen or f[2] not in seen:
            train.append(f)
            seen.update((f[0], f[2]))
        elif len(valid) < n_valid:
            valid.append(f)
        else:
            test.append(f)

    entities, relations = Vocab(), Vocab()

    def code(fs):
        return [Triple(entities.add(h), relations.add(r), entities.add(t)) for h, r, t in fs]

    tr, va, te = code(train), code(valid), code(test)
    desc = {}
    if descriptions:
        text = {}
        drng = random.Random(seed + 1)
        associates: dict[str, set[str]] = {p: set() for p in people}
        for a, r, b in sorted(facts):
            if r in ("colleague of", "knows"):
                associates[a].add(b)
                associates[b].add(a)
        for p in people:
            parts = [f"from {home[p]}", f"employed by {employer[p]}"]
            if drng.random() < 0.5:
                parts.append(f"trained in {field_of_company[employer[p]]}")
            known = sorted(associates[p])
            if known:
                shown = drng.sample(known, min(len(known), 6))
                parts.append("associate of " + " ".join(shown))
            text[p] = " , ".join(parts)
        for c in ents["city"]:
            text[c] = f"a city in {city_country[c]}"
        for c in ents["company"]:
            text[c] = f"based in {company_city[c]} , active in {field_of_company[c]}"
        desc = {entities.id(n): t for n, t in text.items() if n in entities}
    return KnowledgeGraph(entities, relations, tr, va, te, desc)
