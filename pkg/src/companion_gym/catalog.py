"""Product catalog, BM25 product index and the ``product_search``/``product_view`` tools."""

from __future__ import annotations

import heapq
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Any, Iterable, Iterator

from .errors import DuplicateKeyError, SchemaError, ToolError

INDEX_FORMAT_VERSION = 1
DEFAULT_K1 = 0.9
DEFAULT_B = 0.4
DEFAULT_SEARCH_K = 50

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)
_CENT = Decimal("0.01")


def tokenize(text: str, stem: bool = False) -> list[str]:
    """Lowercase alphanumeric runs; no stopwords."""
    tokens = _TOKEN_RE.findall(text.lower())
    if stem:
        tokens = [_strip_plural(t) for t in tokens]
    return tokens


def _strip_plural(token: str) -> str:
    # Deliberately tiny: plural folding only.
    if len(token) > 4 and token.endswith("ies"):
        return token[:-3] + "y"
    if len(token) > 4 and token.endswith(("ches", "shes", "sses", "xes")):
        return token[:-2]
    if len(token) > 3 and token.endswith("s") and not token.endswith(("ss", "us", "is")):
        return token[:-1]
    return token


def to_price(value: Any) -> Decimal:
    if isinstance(value, bool):
        raise ValueError("boolean is not a price")
    if isinstance(value, float):
        value = repr(value)
    try:
        price = Decimal(str(value))
    except InvalidOperation as exc:
        raise ValueError(f"not a number: {value!r}") from exc
    if not price.is_finite():
        raise ValueError(f"not a finite number: {value!r}")
    return price.quantize(_CENT)


@dataclass(frozen=True)
class Product:
    product_id: str
    name: str
    category: str
    price: Decimal
    shop_id: str
    brand: str | None = None
    features: dict[str, str] = field(default_factory=dict)
    options: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "product_id": self.product_id,
            "name": self.name,
            "category": self.category,
            "brand": self.brand,
            "price": float(self.price),
            "shop_id": self.shop_id,
            "features": dict(self.features),
            "options": {k: list(v) for k, v in self.options.items()},
        }

    def document_text(self) -> str:
        """Text indexed for retrieval, in the fixed order name, category, brand, features, options."""
        parts = [self.name, self.category, self.brand or ""]
        parts.extend(f"{k} {v}" for k, v in self.features.items())
        parts.extend(f"{k} {' '.join(vs)}" for k, vs in self.options.items())
        return " ".join(parts)

    def feature_strings(self) -> list[str]:
        """``"name: value"`` strings for every feature and every option value."""
        out = [f"{k}: {v}" for k, v in self.features.items()]
        for k, values in self.options.items():
            out.extend(f"{k}: {v}" for v in values)
        return out

    @classmethod
    def from_dict(cls, data: Any, line: int | None = None) -> "Product":
        if not isinstance(data, dict):
            raise SchemaError("expected a JSON object", line=line)

        def text(name: str, optional: bool = False) -> str | None:
            value = data.get(name)
            if value is None and optional:
                return None
            if not isinstance(value, str):
                raise SchemaError("expected a string", line=line, field=name)
            return value

        product_id = text("product_id")
        if not product_id:
            raise SchemaError("must be non-empty", line=line, field="product_id")
        try:
            price = to_price(data.get("price"))
        except ValueError as exc:
            raise SchemaError(str(exc), line=line, field="price") from None
        if price < 0:
            raise SchemaError("must be >= 0", line=line, field="price")

        features = data.get("features", {})
        if not isinstance(features, dict) or not all(
            isinstance(k, str) and isinstance(v, str) for k, v in features.items()
        ):
            raise SchemaError("expected an object of strings", line=line, field="features")
        options = data.get("options", {})
        if not isinstance(options, dict) or not all(
            isinstance(k, str) and isinstance(v, list) and all(isinstance(x, str) for x in v)
            for k, v in options.items()
        ):
            raise SchemaError("expected an object of string lists", line=line, field="options")

        return cls(
            product_id=product_id,
            name=text("name"),
            category=text("category"),
            brand=text("brand", optional=True),
            price=price,
            shop_id=text("shop_id"),
            features=dict(features),
            options={k: list(v) for k, v in options.items()},
        )


class Catalog:
    """Immutable-by-convention mapping of product_id to Product."""

    def __init__(self, products: Iterable[Product] = ()):
        self._products: dict[str, Product] = {}
        for product in products:
            if product.product_id in self._products:
                raise DuplicateKeyError(product.product_id)
            self._products[product.product_id] = product

    def __len__(self) -> int:
        return len(self._products)

    def __iter__(self) -> Iterator[Product]:
        return iter(self._products.values())

    def __contains__(self, product_id: object) -> bool:
        return product_id in self._products

    def get(self, product_id: str) -> Product | None:
        return self._products.get(product_id)

    def __getitem__(self, product_id: str) -> Product:
        return self._products[product_id]

    def ids(self) -> list[str]:
        return list(self._products)

    def categories(self) -> list[str]:
        return sorted({p.category for p in self})

    def feature_names(self) -> set[str]:
        names: set[str] = set()
        for p in self:
            names.update(p.features)
            names.update(p.options)
        return names

    def to_jsonl(self) -> str:
        return "".join(json.dumps(p.to_dict(), ensure_ascii=False) + "\n" for p in self)


def ingest_products(path: str | Path) -> Catalog:
    """Load a product JSONL file; the whole file is rejected on any bad line or duplicate id."""
    products: list[Product] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                data = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            product = Product.from_dict(data, line=lineno)
            if product.product_id in seen:
                raise DuplicateKeyError(product.product_id, line=lineno)
            seen.add(product.product_id)
            products.append(product)
    return Catalog(products)


@dataclass
class ProductIndex:
    """Inverted index with BM25 statistics.

    Documents are numbered in ascending product_id order, so postings lists
    (which are kept in document order) are also sorted by product_id.
    """

    doc_ids: list[str]
    doc_lengths: list[int]
    doc_shops: list[str]
    doc_prices: list[Decimal]
    postings: dict[str, list[tuple[int, int]]]
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    stem: bool = False

    @property
    def doc_count(self) -> int:
        return len(self.doc_ids)

    @property
    def avg_doc_length(self) -> float:
        if not self.doc_ids:
            return 0.0
        return sum(self.doc_lengths) / len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.doc_count
        return math.log(1.0 + (n - df + 0.5) / (df + 0.5))

    def term_score(self, term_idf: float, tf: int, doc_len: int, avgdl: float) -> float:
        norm = self.k1 * (1.0 - self.b + self.b * doc_len / avgdl)
        return term_idf * (tf * (self.k1 + 1.0)) / (tf + norm)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "format_version": INDEX_FORMAT_VERSION,
            "k1": self.k1,
            "b": self.b,
            "stem": self.stem,
            "doc_count": self.doc_count,
            "avg_doc_length": self.avg_doc_length,
            "docs": [
                {"product_id": pid, "length": length, "shop_id": shop, "price": str(price)}
                for pid, length, shop, price in zip(
                    self.doc_ids, self.doc_lengths, self.doc_shops, self.doc_prices
                )
            ],
        }
        (directory / "index-meta.json").write_text(
            json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        with open(directory / "postings.jsonl", "w", encoding="utf-8") as fh:
            for term in sorted(self.postings):
                entries = [[self.doc_ids[d], tf] for d, tf in self.postings[term]]
                fh.write(json.dumps({"term": term, "postings": entries}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ProductIndex":
        directory = Path(directory)
        try:
            meta = json.loads((directory / "index-meta.json").read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SchemaError(f"unreadable index metadata: {exc}") from None
        version = meta.get("format_version")
        if version != INDEX_FORMAT_VERSION:
            raise SchemaError(f"unsupported index format version {version!r}", field="format_version")
        docs = meta["docs"]
        doc_ids = [d["product_id"] for d in docs]
        position = {pid: i for i, pid in enumerate(doc_ids)}
        postings: dict[str, list[tuple[int, int]]] = {}
        with open(directory / "postings.jsonl", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                row = json.loads(raw)
                try:
                    postings[row["term"]] = [(position[pid], int(tf)) for pid, tf in row["postings"]]
                except KeyError as exc:
                    raise SchemaError(f"posting refers to unknown document {exc}", line=lineno) from None
        return cls(
            doc_ids=doc_ids,
            doc_lengths=[int(d["length"]) for d in docs],
            doc_shops=[d["shop_id"] for d in docs],
            doc_prices=[Decimal(d["price"]) for d in docs],
            postings=postings,
            k1=float(meta["k1"]),
            b=float(meta["b"]),
            stem=bool(meta["stem"]),
        )


def build_product_index(
    catalog: Catalog, k1: float = DEFAULT_K1, b: float = DEFAULT_B, stem: bool = False
) -> ProductIndex:
    products = sorted(catalog, key=lambda p: p.product_id)
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for doc, product in enumerate(products):
        tokens = tokenize(product.document_text(), stem=stem)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((doc, tf))
    return ProductIndex(
        doc_ids=[p.product_id for p in products],
        doc_lengths=lengths,
        doc_shops=[p.shop_id for p in products],
        doc_prices=[p.price for p in products],
        postings=postings,
        k1=k1,
        b=b,
        stem=stem,
    )


@dataclass(frozen=True)
class PriceFilter:
    low: Decimal | None = None
    high: Decimal | None = None

    def __contains__(self, price: Decimal) -> bool:
        if self.low is not None and price < self.low:
            return False
        if self.high is not None and price > self.high:
            return False
        return True


_NUM = r"\$?\s*(\d+(?:\.\d+)?)"
_RANGE_RE = re.compile(rf"^{_NUM}\s*-\s*{_NUM}$")
_BOUND_RE = re.compile(rf"^(<=|>=)\s*{_NUM}$")


def parse_price_filter(text: str | None) -> PriceFilter | None:
    """Parse ``a-b`` (inclusive), ``<=x`` or ``>=x``. Blank means no filter."""
    if text is None:
        return None
    if not isinstance(text, str):
        text = str(text)
    text = text.strip()
    if not text:
        return None
    m = _RANGE_RE.match(text)
    if m:
        low, high = Decimal(m.group(1)), Decimal(m.group(2))
        if low > high:
            raise ToolError(f"invalid price range {text!r}: lower bound exceeds upper bound")
        return PriceFilter(low, high)
    m = _BOUND_RE.match(text)
    if m:
        bound = Decimal(m.group(2))
        return PriceFilter(high=bound) if m.group(1) == "<=" else PriceFilter(low=bound)
    raise ToolError(f"invalid price filter {text!r}; expected 'min-max', '<=x' or '>=x'")


def product_search(
    index: ProductIndex,
    query: str,
    shop_id: str | None = None,
    price: str | PriceFilter | None = None,
    k: int = DEFAULT_SEARCH_K,
) -> list[tuple[str, float]]:
    """Rank products by BM25; only positive scores are returned.

    Shop and price filters are applied before ranking. Ties are ordered by
    ascending product_id.
    """
    if k < 1:
        raise ToolError("k must be >= 1")
    price_filter = price if isinstance(price, PriceFilter) or price is None else parse_price_filter(price)
    if not index.doc_ids:
        return []
    shop_id = shop_id or None

    terms = list(dict.fromkeys(tokenize(query, stem=index.stem)))
    avgdl = index.avg_doc_length
    scores: dict[int, float] = {}
    for term in terms:
        entries = index.postings.get(term)
        if not entries:
            continue
        term_idf = index.idf(term)
        for doc, tf in entries:
            if shop_id is not None and index.doc_shops[doc] != shop_id:
                continue
            if price_filter is not None and index.doc_prices[doc] not in price_filter:
                continue
            scores[doc] = scores.get(doc, 0.0) + index.term_score(
                term_idf, tf, index.doc_lengths[doc], avgdl
            )
    top = heapq.nsmallest(
        k,
        ((score, doc) for doc, score in scores.items() if score > 0),
        key=lambda item: (-item[0], index.doc_ids[item[1]]),
    )
    return [(index.doc_ids[doc], score) for score, doc in top]


@dataclass(frozen=True)
class NotFound:
    key: Any

    def to_dict(self) -> dict[str, Any]:
        return {"not_found": self.key}


def product_view(catalog: Catalog, product_ids: list[str]) -> list[Product | NotFound]:
    if not product_ids:
        raise ToolError("product_ids must be a non-empty list")
    return [catalog.get(pid) or NotFound(pid) for pid in product_ids]
