"""Hard compression plans: which heads, head dims, hidden units and blocks go."""
from __future__ import annotations

import json
from dataclasses import dataclass, field


class InvalidPlanError(ValueError):
    pass


@dataclass
class BlockPlan:
    skip: bool = False
    dropped_heads: tuple[int, ...] = ()
    # head index -> dropped dims within that head (only for kept heads)
    dropped_dims: dict[int, tuple[int, ...]] = field(default_factory=dict)
    dropped_hidden: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "skip": self.skip,
            "dropped_heads": list(self.dropped_heads),
            "dropped_dims": {str(h): list(d) for h, d in sorted(self.dropped_dims.items())},
            "dropped_hidden": list(self.dropped_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BlockPlan":
        return cls(
            skip=bool(d["skip"]),
            dropped_heads=tuple(int(h) for h in d["dropped_heads"]),
            dropped_dims={int(h): tuple(int(i) for i in v) for h, v in d["dropped_dims"].items()},
            dropped_hidden=tuple(int(i) for i in d["dropped_hidden"]),
        )


@dataclass
class CompressionPlan:
    blocks: list[BlockPlan]
    flops: float | None = None
    budget: float | None = None
    dense_flops: float | None = None

    @classmethod
    def empty(cls, num_blocks: int) -> "CompressionPlan":
        return cls([BlockPlan() for _ in range(num_blocks)])

    @property
    def skip_mask(self) -> list[bool]:
        return [b.skip for b in self.blocks]

    def to_json(self) -> str:
        doc = {
            "flops": self.flops,
            "budget": self.budget,
            "dense_flops": self.dense_flops,
            "blocks": [dict(index=i, **b.to_dict()) for i, b in enumerate(self.blocks)],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CompressionPlan":
        doc = json.loads(text)
        blocks = [BlockPlan.from_dict(b) for b in sorted(doc["blocks"], key=lambda b: b["index"])]
        return cls(blocks, doc.get("flops"), doc.get("budget"), doc.get("dense_flops"))
