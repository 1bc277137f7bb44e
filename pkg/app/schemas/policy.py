# app/schemas/policy.py
# Pydantic: policy and profile documents ({"levels": [[{"g":..,"p":..}], ...]})
from __future__ import annotations

from typing import List

from pydantic import BaseModel, ConfigDict, Field

from app.services.policy_service import Policy, make_grid_policy


class Atom(BaseModel):
    model_config = ConfigDict(extra="forbid")

    g: float = Field(..., ge=0)
    p: float = Field(..., ge=0, le=1)


class PolicyDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: List[List[Atom]] = Field(..., min_length=2)

    @classmethod
    def from_policy(cls, policy: Policy) -> "PolicyDocument":
        return cls.model_validate(policy.to_dict())

    def to_policy(self, g_max: float) -> Policy:
        return make_grid_policy([[(a.g, a.p) for a in lv] for lv in self.levels], g_max)


class ProfileDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    policies: List[PolicyDocument] = Field(..., min_length=1)

    def to_policies(self, g_max: list[float]) -> list[Policy]:
        """One g_max per policy (users may carry different caps)."""
        return [doc.to_policy(cap) for doc, cap in zip(self.policies, g_max)]
