"""Desk-scale synthetic catalog and distractor-session pool.

Feature values are multi-word phrases without digits-only tokens so that a
category-only instruction, a voucher sentence or a budget amount can never
contain one by accident.
"""

from __future__ import annotations

import json
import random
from decimal import Decimal
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any

from ..catalog import Catalog, Product
from ..memory import Turn

CATEGORIES: dict[str, tuple[str, ...]] = {
    "mouse": ("color", "connectivity", "grip", "power source", "warranty", "finish", "weight class"),
    "keyboard": ("color", "connectivity", "switch type", "layout", "power source", "warranty", "finish"),
    "desk lamp": ("color", "light tone", "power source", "finish", "style", "warranty", "mount"),
    "backpack": ("color", "material", "capacity", "water resistance", "style", "warranty", "closure"),
    "water bottle": ("color", "material", "capacity", "insulation", "lid type", "finish", "warranty"),
    "running shoes": ("color", "cushioning", "upper material", "weight class", "style", "closure", "warranty"),
    "yoga mat": ("color", "material", "thickness", "texture", "weight class", "warranty", "style"),
    "coffee grinder": ("color", "burr type", "power source", "noise level", "capacity", "finish", "warranty"),
    "electric kettle": ("color", "material", "capacity", "temperature control", "finish", "warranty", "style"),
    "blender": ("color", "capacity", "noise level", "blade material", "finish", "warranty", "style"),
    "tent": ("color", "capacity", "water resistance", "weight class", "material", "setup", "warranty"),
    "sleeping bag": ("color", "insulation", "weight class", "water resistance", "shape", "closure", "warranty"),
    "headphones": ("color", "connectivity", "noise level", "fit", "power source", "finish", "warranty"),
    "phone case": ("color", "material", "finish", "grip", "style", "closure", "warranty"),
    "monitor": ("color", "panel type", "finish", "mount", "style", "connectivity", "warranty"),
    "office chair": ("color", "upper material", "cushioning", "style", "weight class", "finish", "warranty"),
    "bookshelf": ("color", "material", "style", "finish", "mount", "weight class", "warranty"),
    "rice cooker": ("color", "capacity", "inner pot", "finish", "noise level", "style", "warranty"),
    "air purifier": ("color", "filter type", "noise level", "power source", "style", "finish", "warranty"),
    "umbrella": ("color", "canopy material", "closure", "weight class", "style", "water resistance", "warranty"),
    "wallet": ("color", "material", "closure", "style", "finish", "capacity", "warranty"),
    "wristwatch": ("color", "strap material", "water resistance", "power source", "style", "finish", "warranty"),
    "sunglasses": ("color", "lens type", "frame material", "style", "fit", "finish", "warranty"),
    "camera bag": ("color", "material", "capacity", "water resistance", "closure", "style", "warranty"),
    "frying pan": ("color", "coating", "material", "handle", "finish", "weight class", "warranty"),
    "toothbrush": ("color", "bristle type", "power source", "style", "grip", "finish", "warranty"),
    "hair dryer": ("color", "power source", "noise level", "attachment", "style", "finish", "warranty"),
    "bath towel": ("color", "material", "texture", "thickness", "style", "finish", "warranty"),
    "pillow": ("color", "fill type", "cover material", "firmness", "shape", "texture", "warranty"),
    "standing desk": ("color", "frame material", "noise level", "finish", "style", "mount", "warranty"),
}

FEATURE_VALUES: dict[str, tuple[str, ...]] = {
    "color": ("matte black", "navy blue", "forest green", "crimson red", "pearl white", "slate gray"),
    "connectivity": ("bluetooth pairing", "wireless dongle", "braided cable"),
    "grip": ("ergonomic grip", "ambidextrous grip", "textured grip"),
    "power source": ("rechargeable battery", "replaceable batteries", "mains powered"),
    "warranty": ("one-year warranty", "two-year warranty", "lifetime warranty"),
    "finish": ("glossy finish", "satin finish", "brushed finish"),
    "weight class": ("ultralight build", "standard heft", "heavy-duty build"),
    "switch type": ("tactile switches", "linear switches", "clicky switches"),
    "layout": ("full-size layout", "tenkeyless layout", "compact layout"),
    "light tone": ("warm white light", "cool daylight", "adjustable tone"),
    "style": ("minimalist look", "retro look", "sporty look", "classic look"),
    "mount": ("clamp mount", "freestanding base", "wall bracket"),
    "material": ("stainless steel", "bamboo fiber", "recycled nylon", "full-grain leather", "organic cotton"),
    "capacity": ("small capacity", "medium capacity", "large capacity"),
    "water resistance": ("splash resistant", "fully waterproof", "no water protection"),
    "closure": ("zipper closure", "magnetic closure", "drawstring closure", "buckle closure"),
    "insulation": ("double-wall vacuum", "synthetic insulation", "down insulation"),
    "lid type": ("straw lid", "screw cap", "flip-top lid"),
    "cushioning": ("plush cushioning", "firm cushioning", "responsive foam"),
    "upper material": ("breathable mesh", "knit fabric", "synthetic suede"),
    "thickness": ("thin profile", "medium thickness", "extra thick"),
    "texture": ("smooth texture", "ribbed texture", "waffle texture"),
    "burr type": ("conical burr", "flat burr", "blade grinder"),
    "noise level": ("whisper quiet", "moderate noise", "loud motor"),
    "temperature control": ("preset temperatures", "variable temperature", "boil only"),
    "blade material": ("hardened steel blades", "titanium coated blades"),
    "setup": ("instant setup", "freestanding poles", "trekking pole pitch"),
    "shape": ("mummy shape", "rectangular shape", "contour shape"),
    "fit": ("over-ear fit", "on-ear fit", "in-ear fit", "snug fit"),
    "panel type": ("ips panel", "va panel", "oled panel"),
    "inner pot": ("ceramic inner pot", "nonstick inner pot", "clad inner pot"),
    "filter type": ("hepa filter", "carbon filter", "ionic filter"),
    "canopy material": ("pongee canopy", "polyester canopy"),
    "strap material": ("leather strap", "silicone strap", "mesh bracelet"),
    "lens type": ("polarized lenses", "gradient lenses", "mirrored lenses"),
    "frame material": ("acetate frame", "titanium frame", "aluminum frame"),
    "coating": ("ceramic coating", "ptfe coating", "seasoned cast surface"),
    "handle": ("stay-cool handle", "removable handle", "helper handle"),
    "bristle type": ("soft bristles", "medium bristles", "charcoal bristles"),
    "attachment": ("diffuser attachment", "concentrator nozzle", "comb attachment"),
    "fill type": ("memory foam fill", "down fill", "buckwheat fill"),
    "cover material": ("cotton cover", "silk cover", "cooling gel cover"),
    "firmness": ("soft firmness", "medium firmness", "firm support"),
}

OPTIONS: dict[str, tuple[str, ...]] = {
    "size": ("small", "medium", "large"),
    "pack": ("single pack", "twin pack"),
    "edition": ("standard edition", "limited edition"),
}

BRANDS = ("Acme", "Northwind", "Lumio", "Brightpath", "Koda", "Vessel", "Orbit", "Halden", "Tamsin", "Quill")
PRICE_RANGE = {"low": (8, 60), "mid": (25, 150), "high": (60, 400)}
_CATEGORY_TIER = {c: ("low", "mid", "high")[i % 3] for i, c in enumerate(CATEGORIES)}


def make_catalog(n_products: int = 300, seed: int = 0, n_shops: int = 8) -> Catalog:
    """Deterministic synthetic catalog, categories assigned round-robin."""
    rng = random.Random(seed)
    categories = list(CATEGORIES)
    products = []
    for i in range(n_products):
        category = categories[i % len(categories)]
        brand = rng.choice(BRANDS)
        model = f"{rng.choice('ABCDEFGHJKLMNPRSTVWXZ')}{rng.choice('ABCDEFGHJKLMNPRSTVWXZ')}{rng.randint(100, 999)}"
        features = {name: rng.choice(FEATURE_VALUES[name]) for name in CATEGORIES[category]}
        options = {}
        if rng.random() < 0.5:
            opt = rng.choice(sorted(OPTIONS))
            options[opt] = list(OPTIONS[opt])
        low, high = PRICE_RANGE[_CATEGORY_TIER[category]]
        cents = rng.randint(low * 100, high * 100)
        cents = cents - cents % 100 + 99
        products.append(
            Product(
                product_id=f"P{i:05d}",
                name=f"{brand} {category.title()} {model}",
                category=category,
                brand=brand,
                price=Decimal(cents) / 100,
                shop_id=f"S{rng.randrange(n_shops):02d}",
                features=features,
                options=options,
            )
        )
    return Catalog(products)


_TOPICS: dict[str, dict[str, Any]] = {
    "cooking": {
        "openers": [
            "I want to cook something new this weekend for friends.",
            "My sourdough starter keeps failing and I do not know why.",
            "Can you suggest a vegetarian dinner that takes under thirty minutes?",
        ],
        "replies": [
            "A roasted vegetable lasagna works well for a crowd and can be assembled ahead.",
            "Starters usually struggle when the kitchen is cold, so try a warmer spot and feed it twice daily.",
            "A chickpea curry with spinach comes together quickly and keeps well.",
        ],
        "follow": [
            "How long should it rest before serving?",
            "Would rye flour help at all?",
            "Can I swap the spinach for kale?",
        ],
        "answers": [
            "Let it rest for about fifteen minutes so the layers set.",
            "Rye often speeds up fermentation, so a small amount can help.",
            "Kale works fine, just add it a few minutes earlier.",
        ],
    },
    "travel": {
        "openers": [
            "I am planning a trip to Lisbon in the spring.",
            "What should I know before a long train journey across Europe?",
            "We are thinking about a road trip along the coast.",
        ],
        "replies": [
            "Spring is pleasant there, and the old neighborhoods are best explored on foot.",
            "Regional passes can save money, and booking seats early helps on busy routes.",
            "Coastal drives are lovely, plan stops every two hours to stay fresh.",
        ],
        "follow": [
            "Which day trips would you recommend?",
            "Is it better to travel overnight?",
            "Where could we stay on the second night?",
        ],
        "answers": [
            "Sintra and Cascais are both easy by train and make good day trips.",
            "Overnight trains save a hotel night but daytime trips show more scenery.",
            "A small guesthouse in a fishing village is usually quieter than the big towns.",
        ],
    },
    "fitness": {
        "openers": [
            "I want to start jogging again after a long break.",
            "How can I build a simple home workout routine?",
            "My lower back feels stiff after long days at work.",
        ],
        "replies": [
            "Start with walk and jog intervals three times a week and build slowly.",
            "Bodyweight squats, push-ups and planks make a solid base routine.",
            "Gentle stretching and short walking breaks during the day often help.",
        ],
        "follow": [
            "How fast should I increase the distance?",
            "How many sets should I do?",
            "Which stretches are safest?",
        ],
        "answers": [
            "A common guideline is about ten percent more each week.",
            "Three sets of ten to fifteen repetitions is a good starting point.",
            "Knee-to-chest and cat-cow stretches are gentle options.",
        ],
    },
    "work": {
        "openers": [
            "I have a presentation to my team next week and feel nervous.",
            "How do I ask my manager for more flexible hours?",
            "My inbox is overflowing and I cannot keep up.",
        ],
        "replies": [
            "Rehearsing out loud a few times and opening with a story usually calms nerves.",
            "Frame the request around outcomes and propose a short trial period.",
            "Try batching email into two fixed blocks each day and unsubscribing aggressively.",
        ],
        "follow": [
            "What if someone asks a question I cannot answer?",
            "Should I put it in writing first?",
            "What about messages that need long replies?",
        ],
        "answers": [
            "It is fine to say you will follow up after checking the details.",
            "A short written note before the meeting gives your manager time to think.",
            "Flag them and reserve a longer slot later in the week.",
        ],
    },
    "gardening": {
        "openers": [
            "My tomato plants have yellow leaves at the bottom.",
            "What herbs grow well on a sunny balcony?",
            "When should I plant bulbs for spring flowers?",
        ],
        "replies": [
            "Lower leaves often yellow from uneven watering or a lack of nitrogen.",
            "Basil, thyme and rosemary all enjoy full sun and containers.",
            "Autumn planting before the ground freezes gives the best spring show.",
        ],
        "follow": [
            "Should I remove those leaves?",
            "How often should I give them a drink?",
            "How deep should they go?",
        ],
        "answers": [
            "Yes, trimming them improves airflow around the plant.",
            "Whenever the top inch of soil feels dry.",
            "Roughly two to three times the height of the bulb.",
        ],
    },
    "books": {
        "openers": [
            "Can you recommend a mystery novel for a long flight?",
            "I want to read more history but find it dry.",
            "Our book club needs a pick for next month.",
        ],
        "replies": [
            "A classic country-house mystery is a relaxing choice for travel.",
            "Narrative histories that follow a single person tend to read like novels.",
            "A recent literary novel with a strong discussion angle works well for clubs.",
        ],
        "follow": [
            "Is there a series I could continue afterwards?",
            "Any period you would start with?",
            "How long is it?",
        ],
        "answers": [
            "Several detectives have long series that stay enjoyable.",
            "The age of exploration has many lively accounts.",
            "Around three hundred pages, manageable in a month.",
        ],
    },
}


def build_distractor_pool(n_sessions: int = 80, seed: int = 2024) -> list[list[Turn]]:
    """Generic small-talk sessions of 2 to 8 turns."""
    rng = random.Random(seed)
    topics = sorted(_TOPICS)
    pool = []
    for i in range(n_sessions):
        topic = _TOPICS[topics[i % len(topics)]]
        j = rng.randrange(len(topic["openers"]))
        turns = [Turn("user", topic["openers"][j]), Turn("assistant", topic["replies"][j])]
        for _ in range(rng.randint(0, 3)):
            k = rng.randrange(len(topic["follow"]))
            turns += [Turn("user", topic["follow"][k]), Turn("assistant", topic["answers"][k])]
        pool.append(turns)
    return pool


def save_distractor_pool(pool: list[list[Turn]], path: str | Path) -> None:
    data = [{"session_index": i, "date": "2024-01-01", "turns": [t.to_dict() for t in s]} for i, s in enumerate(pool)]
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


@lru_cache(maxsize=4)
def _load_pool_text(path: str | None) -> str:
    if path is None:
        return resources.files("companion_gym.data").joinpath("distractors.json").read_text(encoding="utf-8")
    return Path(path).read_text(encoding="utf-8")


def load_distractor_pool(path: str | Path | None = None) -> list[list[Turn]]:
    """Load a pool in the session schema (dates and indices are ignored)."""
    data = json.loads(_load_pool_text(None if path is None else str(path)))
    return [[Turn(t["role"], t["content"]) for t in s["turns"]] for s in data]
