"""Seeded synthetic tables shaped like the running example: users, products
with images, reviews with text and images, and sensor series."""

from __future__ import annotations

import numpy as np

from taskdb.backends.zoo import IMAGE_SHAPE, SERIES_LEN
from taskdb.executor.table import Table
from taskdb.tensor import Mvec

GENDERS = ("female", "male", "other")
LOCATIONS = ("berlin", "lagos", "lima", "osaka", "toronto")
PRODUCT_NAMES = ("phone", "tablet", "laptop", "watch", "camera", "speaker")
PHRASES = (
    "great value and fast delivery",
    "battery died after a week",
    "works as described",
    "the screen is stunning",
    "arrived broken, very disappointed",
    "average quality for the price",
    "would buy again",
    "terrible customer support",
    "camera takes sharp photos",
    "it is fine, nothing special",
    "love the design",
    "stopped charging, returned it",
)
SENSORS = ("s1", "s2", "s3", "s4")

SENTIMENT_LABELS = ("POS", "NEG", "NEU")
IMAGE_LABELS = ("iPhone 16", "Galaxy S24", "Pixel 9", "Other")


def _image(rng: np.random.Generator) -> Mvec:
    return Mvec.from_array(rng.normal(0.0, 1.0, size=IMAGE_SHAPE))


def user_table(n: int = 20, seed: int = 0) -> Table:
    rng = np.random.default_rng(seed)
    return Table("user", {
        "id": list(range(1, n + 1)),
        "gender": [GENDERS[i] for i in rng.integers(0, len(GENDERS), n)],
        "location": [LOCATIONS[i] for i in rng.integers(0, len(LOCATIONS), n)],
        "age": [int(a) for a in rng.integers(18, 80, n)],
    })


def product_table(n: int = 10, seed: int = 1) -> Table:
    rng = np.random.default_rng(seed)
    return Table("product", {
        "id": list(range(1, n + 1)),
        "name": [PRODUCT_NAMES[i % len(PRODUCT_NAMES)] for i in range(n)],
        "img": [_image(rng) for _ in range(n)],
        "price": [round(float(p), 2) for p in rng.uniform(5.0, 900.0, n)],
    })


def review_table(n: int = 100, n_users: int = 20, n_products: int = 10, seed: int = 2) -> Table:
    rng = np.random.default_rng(seed)
    return Table("review", {
        "id": list(range(1, n + 1)),
        "uid": [int(u) for u in rng.integers(1, n_users + 1, n)],
        "pid": [int(p) for p in rng.integers(1, n_products + 1, n)],
        "comment": [PHRASES[i] for i in rng.integers(0, len(PHRASES), n)],
        "img": [_image(rng) for _ in range(n)],
        "rating": [int(r) for r in rng.integers(1, 6, n)],
    })


def series_table(n: int = 50, seed: int = 3) -> Table:
    rng = np.random.default_rng(seed)
    t = np.arange(SERIES_LEN)
    windows = []
    for _ in range(n):
        phase, amp = rng.uniform(0, 2 * np.pi), rng.uniform(0.5, 2.0)
        windows.append(Mvec.from_array(amp * np.sin(t / 3.0 + phase) + rng.normal(0, 0.1, SERIES_LEN)))
    return Table("series", {
        "id": list(range(1, n + 1)),
        "sensor": [SENSORS[i % len(SENSORS)] for i in range(n)],
        "window": windows,
        "value": [round(float(v), 4) for v in rng.normal(0.0, 1.0, n)],
    })


def demo_tables(n_users: int = 20, n_products: int = 10, n_reviews: int = 100, n_series: int = 50,
                seed: int = 0) -> dict:
    """The four example tables, sized for tests; ``seed`` shifts every generator."""
    tables = [
        user_table(n_users, seed),
        product_table(n_products, seed + 1),
        review_table(n_reviews, n_users, n_products, seed + 2),
        series_table(n_series, seed + 3),
    ]
    return {t.name: t for t in tables}


def big_product_table(n: int = 10_000, seed: int = 7, name: str = "product") -> Table:
    """A large image table for throughput runs."""
    return product_table(n, seed) if name == "product" else Table(name, product_table(n, seed).columns)


def big_review_table(n: int = 10_000, seed: int = 8) -> Table:
    return review_table(n, n_users=20, n_products=10, seed=seed)
