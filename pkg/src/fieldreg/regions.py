"""Region-to-organ grouping and the fixed block order of the pipeline."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError

# Block execution order is fixed; the whole-body block runs last to smooth
# and balance the preceding contributions.
BLOCK_ORDER = ("affine", "bone", "thorax", "abdomen", "wholebody")
REGION_BLOCKS = ("bone", "thorax", "abdomen")


@dataclass(frozen=True)
class RegionSpec:
    """Named anatomical regions, each an ordered list of organ names."""

    regions: dict[str, tuple[str, ...]]

    def __post_init__(self):
        object.__setattr__(
            self, "regions",
            {str(r): tuple(str(o) for o in organs) for r, organs in self.regions.items()})
        seen: set[str] = set()
        for region, organs in self.regions.items():
            for o in organs:
                if o in seen:
                    raise ContractError(f"organ {o!r} appears in more than one region")
                seen.add(o)
        missing = [r for r in REGION_BLOCKS if r not in self.regions]
        if missing:
            raise ContractError(f"region spec missing regions {missing}")

    @property
    def all_organs(self) -> tuple[str, ...]:
        out: list[str] = []
        for r in REGION_BLOCKS:
            out.extend(self.regions[r])
        return tuple(out)

    def organs_for_block(self, block: str) -> tuple[str, ...]:
        """Organs whose overlap term trains the given block.

        Region blocks see only their own organs; the affine and whole-body
        blocks see the union of all regions.
        """
        if block in ("affine", "wholebody"):
            return self.all_organs
        if block in self.regions:
            return self.regions[block]
        raise ContractError(f"unknown block {block!r}")

    def region_of(self, organ: str) -> str:
        for region, organs in self.regions.items():
            if organ in organs:
                return region
        raise ContractError(f"organ {organ!r} not in any region")

    def to_json(self) -> dict:
        return {r: list(o) for r, o in self.regions.items()}

    @classmethod
    def from_json(cls, obj: dict) -> "RegionSpec":
        return cls({r: tuple(o) for r, o in obj.items()})


def canonical_regions() -> RegionSpec:
    """The default grouping: thorax, abdomen, and skeletal structures."""
    return RegionSpec({
        "thorax": ("lung", "heart"),
        "abdomen": ("liver", "kidney", "pancreas", "spleen", "stomach", "gallbladder"),
        "bone": ("pelvis", "vertebrae", "ribs"),
    })
