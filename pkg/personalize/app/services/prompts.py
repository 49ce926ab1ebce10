"""Training prompt templates and the three prompt pools.

subject pool: "<v*>" only; routed to the subject-masked loss
background pool: supercategory word S and "<A*>"; routed to the background-masked loss
joint pool: "<v*>" and "<A*>"; routed to the unmasked joint loss
"""
from dataclasses import dataclass
from enum import StrEnum

from app.embedders.tokenizer import ATTRACTOR_TOKEN, SUBJECT_TOKEN
from app.services.manifest import caption_words

SINGLE_SLOT_TEMPLATES = (
    "a photo of a {}.",
    "a rendering of a {}.",
    "the photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a close-up photo of the {}.",
    "a rendition of the {}.",
    "a photo of a nice {}.",
)

TWO_SLOT_TEMPLATES = (
    "a photo of a {} in the {}.",
    "a rendering of a {} in the {}.",
    "a cropped photo of the {} in the {}.",
    "the photo of a {} in the {}.",
    "a photo of a clean {} in the {}.",
    "a photo of my {} in the {}.",
    "a photo of the nice {} in the {}.",
    "a good photo of a {} in the {}.",
    "a rendition of a {} in the {}.",
    "a photo of the clean {} in the {}.",
    "a photo of a cool {} in the {}.",
    "a close-up photo of a {} in the {}.",
    "a photo of the cool {} in the {}.",
    "a cropped photo of a {} in the {}.",
    "a photo of one {} in the {}.",
)

# Attractor probe: what does a single token render on its own?
PROBE_TEMPLATE = "a photo of {}."


class PoolKind(StrEnum):
    SUBJECT = "subject"
    BACKGROUND = "background"
    JOINT = "joint"


POOL_ORDER = (PoolKind.SUBJECT, PoolKind.BACKGROUND, PoolKind.JOINT)


@dataclass(frozen=True)
class PromptPools:
    supercategory: str
    subject_pool: tuple[str, ...]
    background_pool: tuple[str, ...]
    joint_pool: tuple[str, ...]

    def pool(self, kind: PoolKind) -> tuple[str, ...]:
        return {
            PoolKind.SUBJECT: self.subject_pool,
            PoolKind.BACKGROUND: self.background_pool,
            PoolKind.JOINT: self.joint_pool,
        }[kind]

    def violations(self) -> list[str]:
        """Broken pool invariants, empty when the pools are well-formed."""
        word = self.supercategory.lower()
        problems: list[str] = []
        for prompt in self.subject_pool:
            if SUBJECT_TOKEN not in prompt or ATTRACTOR_TOKEN in prompt or word in caption_words(prompt):
                problems.append(f"subject pool: {prompt!r}")
        for prompt in self.background_pool:
            if ATTRACTOR_TOKEN not in prompt or SUBJECT_TOKEN in prompt or word not in caption_words(prompt):
                problems.append(f"background pool: {prompt!r}")
        for prompt in self.joint_pool:
            if SUBJECT_TOKEN not in prompt or ATTRACTOR_TOKEN not in prompt:
                problems.append(f"joint pool: {prompt!r}")
        return problems


def build_prompt_pools(supercategory: str) -> PromptPools:
    if not supercategory.strip():
        raise ValueError("supercategory must be non-empty")
    return PromptPools(
        supercategory=supercategory,
        subject_pool=tuple(t.format(SUBJECT_TOKEN) for t in SINGLE_SLOT_TEMPLATES),
        background_pool=tuple(t.format(supercategory, ATTRACTOR_TOKEN) for t in TWO_SLOT_TEMPLATES),
        joint_pool=tuple(t.format(SUBJECT_TOKEN, ATTRACTOR_TOKEN) for t in TWO_SLOT_TEMPLATES),
    )
