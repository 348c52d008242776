"""Deterministic synthetic task generator for desk-scale experiments.

Two domains share one union schema (restaurants carry "food", hotels carry
"style"). Each dialog has exactly one satisfying entity. User turns mention
constraint values either verbatim or through a fixed paraphrase lexicon;
system responses always state the true values, so response-side weak
supervision stays exact while context-side lexical matching is lossy.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .dialogs import Dialog, DialogTurn
from .errors import GenerationRetryError, ValidationError
from .kb import AttributeSchema, Entity, KnowledgeBase

SCHEMA_NAMES = ("name", "area", "food", "style", "pricerange", "phone")

_AREAS = ("north", "south", "east", "west", "centre", "riverside", "hillside", "dockside")
_AREA_SURFACE = {
    "north": "northern",
    "south": "southern",
    "east": "eastern",
    "west": "western",
    "centre": "central",
    "riverside": "riverbank",
    "hillside": "hilltop",
    "dockside": "harbour",
}
_FOODS = (
    "thai", "chinese", "italian", "indian", "french", "korean", "mexican",
    "turkish", "spanish", "japanese", "greek", "lebanese", "vietnamese",
)
_FOOD_SURFACE = {
    "thai": "siam",
    "chinese": "canton",
    "italian": "tuscan",
    "indian": "punjabi",
    "french": "parisian",
    "korean": "seoul",
    "mexican": "aztec",
    "turkish": "anatolian",
    "spanish": "iberian",
    "japanese": "tokyo",
    "greek": "aegean",
    "lebanese": "levantine",
    "vietnamese": "saigon",
}
_STYLES = (
    "boutique", "hostel", "resort", "lodge", "manor", "villa", "inn",
    "suites", "chalet", "cabin", "retreat", "bungalow", "motel",
)
_STYLE_SURFACE = {
    "boutique": "designer",
    "hostel": "backpacker",
    "resort": "seaside",
    "lodge": "alpine",
    "manor": "stately",
    "villa": "mediterranean",
    "inn": "roadside",
    "suites": "serviced",
    "chalet": "ski",
    "cabin": "woodland",
    "retreat": "tranquil",
    "bungalow": "lowrise",
    "motel": "roadstop",
}
_PRICES = ("cheap", "moderate", "expensive")
_PRICE_SURFACE = {"cheap": "budget", "moderate": "midrange", "expensive": "upscale"}

_NAME_ADJ = (
    "golden", "silver", "amber", "crimson", "ivory", "emerald", "sapphire",
    "copper", "velvet", "marble", "cedar", "willow", "lotus", "coral",
    "onyx", "jade", "maple", "aspen", "ember", "quartz",
)
_NAME_NOUN = (
    "palace", "garden", "house", "kitchen", "table", "arms", "court",
    "corner", "terrace", "pavilion", "parlour", "gallery", "vault", "loft",
    "haven", "den", "nook", "yard", "hall", "spire",
)

_CONSTRAINT_PHRASES = {
    "food": ("that serves {m} food", "with {m} cooking"),
    "style": ("in the {m} style", "that feels like a {m} place"),
    "area": ("in the {m} part of town", "around the {m} side"),
    "pricerange": ("with {m} pricing", "at a {m} rate"),
}
_FOLLOWUP_USER = {
    "phone": "can i get the phone number",
    "pricerange": "what is the price range",
    "area": "what part of town is it in",
    "food": "what kind of food do they serve",
    "style": "what style of place is it",
}
_FOLLOWUP_RESPONSE = {
    "phone": "the phone number of {name} is {value}",
    "pricerange": "{name} is in the {value} price range",
    "area": "{name} is in the {value} part of town",
    "food": "{name} serves {value} food",
    "style": "{name} is a {value} place",
}


@dataclass(frozen=True)
class SchemaSpec:
    """Value pools, paraphrase lexicon, and sampling knobs for the generator."""

    areas: tuple[str, ...] = _AREAS
    foods: tuple[str, ...] = _FOODS
    styles: tuple[str, ...] = _STYLES
    prices: tuple[str, ...] = _PRICES
    name_adjectives: tuple[str, ...] = _NAME_ADJ
    name_nouns: tuple[str, ...] = _NAME_NOUN
    surfaces: dict = field(
        default_factory=lambda: {
            "area": dict(_AREA_SURFACE),
            "food": dict(_FOOD_SURFACE),
            "style": dict(_STYLE_SURFACE),
            "pricerange": dict(_PRICE_SURFACE),
        }
    )
    paraphrase_prob: float = 0.7
    allow_name_constraints: bool = True
    max_constraint_retries: int = 40

    def __post_init__(self):
        pooled = set(self.areas) | set(self.foods) | set(self.styles) | set(self.prices)
        for mapping in self.surfaces.values():
            clash = set(mapping.values()) & pooled
            if clash:
                raise ValidationError(f"paraphrase surfaces collide with KB values: {sorted(clash)}")

    def surface(self, rng: random.Random, attr: str, value: str) -> str:
        table = self.surfaces.get(attr, {})
        if value in table and rng.random() < self.paraphrase_prob:
            return table[value]
        return value


def _build_entities(rng: random.Random, n_entities: int, spec: SchemaSpec) -> list[Entity]:
    name_pool = [f"{a} {n}" for a in spec.name_adjectives for n in spec.name_nouns]
    if n_entities > len(name_pool):
        raise GenerationRetryError(
            f"cannot build {n_entities} uniquely named entities from a pool of {len(name_pool)}"
        )
    names = rng.sample(name_pool, n_entities)
    width = max(3, len(str(max(n_entities - 1, 0))))
    n_restaurants = (n_entities + 1) // 2
    entities: list[Entity] = []
    for idx in range(n_entities):
        is_restaurant = idx < n_restaurants
        local = idx if is_restaurant else idx - n_restaurants
        # Systematic (domain attr, area) assignment keeps the pair unique per
        # domain while pools allow, so two-constraint dialogs stay solvable.
        if is_restaurant:
            special = ("food", spec.foods[local % len(spec.foods)])
            area = spec.areas[(local // len(spec.foods)) % len(spec.areas)]
        else:
            special = ("style", spec.styles[local % len(spec.styles)])
            area = spec.areas[(local // len(spec.styles)) % len(spec.areas)]
        values = {
            "name": names[idx],
            "area": area,
            special[0]: special[1],
            "pricerange": rng.choice(spec.prices),
            "phone": f"555-{1000 + idx:04d}",
        }
        entities.append(
            Entity(
                id=f"{idx:0{width}d}",
                values=values,
                domain="restaurant" if is_restaurant else "hotel",
            )
        )
    return entities


def _matching_entities(entities: list[Entity], constraints: list[tuple[str, str]]) -> list[Entity]:
    return [
        e for e in entities if all(e.values.get(attr) == value for attr, value in constraints)
    ]


def _sample_constraints(
    rng: random.Random, entities: list[Entity], gold: Entity, spec: SchemaSpec
) -> list[tuple[str, str]]:
    domain_attr = "food" if gold.domain == "restaurant" else "style"
    candidate_sets = [
        (domain_attr, "area"),
        (domain_attr, "area", "pricerange"),
        (domain_attr, "pricerange"),
        ("area", "pricerange"),
    ]
    for _ in range(spec.max_constraint_retries):
        attrs = rng.choice(candidate_sets)
        constraints = [(a, gold.values[a]) for a in attrs if a in gold.values]
        if len(_matching_entities(entities, constraints)) == 1:
            return constraints
    if spec.allow_name_constraints:
        constraints = [("name", gold.values["name"])]
        if len(_matching_entities(entities, constraints)) == 1:
            return constraints
    raise GenerationRetryError(
        f"could not isolate a unique entity for gold id {gold.id} within retry budget"
    )


def _first_turn(rng: random.Random, gold: Entity, constraints: list[tuple[str, str]], spec: SchemaSpec) -> DialogTurn:
    kind = "restaurant" if gold.domain == "restaurant" else "hotel"
    if constraints[0][0] == "name":
        user = f"hello , can you tell me about {gold.values['name']}"
    else:
        phrases = []
        for attr, value in constraints:
            template = rng.choice(_CONSTRAINT_PHRASES[attr])
            phrases.append(template.format(m=spec.surface(rng, attr, value)))
        user = f"hello , i am looking for a {kind} " + " and ".join(phrases)

    domain_attr = "food" if kind == "restaurant" else "style"
    mentioned = [
        ("name", gold.values["name"]),
        (domain_attr, gold.values[domain_attr]),
        ("area", gold.values["area"]),
    ]
    response = (
        f"{gold.values['name']} is a {gold.values[domain_attr]} {kind} "
        f"in the {gold.values['area']} part of town"
    )
    if rng.random() < 0.5:
        response += f" with {gold.values['pricerange']} pricing"
        mentioned.append(("pricerange", gold.values["pricerange"]))
    return DialogTurn(
        user=user,
        response=response,
        gold_entity_ids=(gold.id,),
        gold_values=tuple(v for _, v in mentioned),
    )


def _followup_turn(rng: random.Random, gold: Entity, asked: set[str]) -> DialogTurn | None:
    options = [a for a in ("phone", "pricerange", "area", "food", "style") if a in gold.values and a not in asked]
    if not options:
        return None
    attr = rng.choice(options)
    asked.add(attr)
    value = gold.values[attr]
    return DialogTurn(
        user=_FOLLOWUP_USER[attr],
        response=_FOLLOWUP_RESPONSE[attr].format(name=gold.values["name"], value=value),
        gold_entity_ids=(gold.id,),
        gold_values=(gold.values["name"], value),
    )


def generate_synthetic_corpus(
    seed: int,
    n_entities: int,
    n_dialogs: int,
    schema_spec: SchemaSpec | None = None,
    condensed_size: int = 7,
) -> tuple[KnowledgeBase, list[Dialog]]:
    """Build a seeded KB plus dialogs, each solvable by exactly one entity."""
    if n_entities < 1 or n_dialogs < 1:
        raise ValidationError("n_entities and n_dialogs must be >= 1")
    spec = schema_spec or SchemaSpec()
    rng = random.Random(seed)
    entities = _build_entities(rng, n_entities, spec)
    kb = KnowledgeBase(schema=AttributeSchema(SCHEMA_NAMES), entities=tuple(entities))

    dialogs: list[Dialog] = []
    for d in range(n_dialogs):
        gold = rng.choice(entities)
        constraints = _sample_constraints(rng, entities, gold, spec)
        turns = [_first_turn(rng, gold, constraints, spec)]
        asked = {attr for attr, _ in constraints}
        n_turns = rng.choices((1, 2, 3), weights=(45, 35, 20))[0]
        while len(turns) < n_turns:
            follow = _followup_turn(rng, gold, asked)
            if follow is None:
                break
            turns.append(follow)

        same_domain = [e.id for e in entities if e.domain == gold.domain and e.id != gold.id]
        k = min(max(condensed_size - 1, 0), len(same_domain))
        condensed = rng.sample(same_domain, k) + [gold.id]
        rng.shuffle(condensed)
        dialogs.append(
            Dialog(
                id=f"dlg{d:04d}",
                turns=tuple(turns),
                domain=gold.domain,
                condensed_entity_ids=tuple(condensed),
            )
        )
    return kb, dialogs


def split_dialogs(
    dialogs: list[Dialog],
    seed: int,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
) -> tuple[list[Dialog], list[Dialog], list[Dialog]]:
    """Deterministic train/val/test split by shuffled dialog order."""
    order = list(dialogs)
    random.Random(seed).shuffle(order)
    n = len(order)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = order[:n_train]
    val = order[n_train : n_train + n_val]
    test = order[n_train + n_val :]
    return train, val, test
