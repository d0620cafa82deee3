"""Specialist roles and phase names shared across the framework."""

from __future__ import annotations

from enum import Enum


class SpecialistRole(str, Enum):
    TEST_ARCHITECT = "TestArchitect"
    TEST_ANALYST = "TestAnalyst"
    INFRASTRUCTURE_MANAGER = "InfrastructureManager"
    ENGINEER = "Engineer"
    INVESTIGATOR = "Investigator"
    JUDGE = "Judge"


class Phase(str, Enum):
    GENERATION = "Generation"
    SETUP = "Setup"
    EXECUTION = "Execution"
    VALIDATION = "Validation"


# Fixed phase order; a later phase never starts after an abort.
PHASE_ORDER = (Phase.GENERATION, Phase.SETUP, Phase.EXECUTION, Phase.VALIDATION)

PHASE_OF_ROLE = {
    SpecialistRole.TEST_ARCHITECT: Phase.GENERATION,
    SpecialistRole.TEST_ANALYST: Phase.GENERATION,
    SpecialistRole.INFRASTRUCTURE_MANAGER: Phase.SETUP,
    SpecialistRole.ENGINEER: Phase.EXECUTION,
    SpecialistRole.INVESTIGATOR: Phase.VALIDATION,
    SpecialistRole.JUDGE: Phase.VALIDATION,
}

SPEC_AUTHORS = frozenset(
    {
        SpecialistRole.TEST_ARCHITECT,
        SpecialistRole.TEST_ANALYST,
        SpecialistRole.INFRASTRUCTURE_MANAGER,
    }
)


class BugCriterion(str, Enum):
    """The five conditions under which the Judge reports a bug."""

    DEVIATION_FROM_EXPECTED = "DeviationFromExpected"
    MISREPORTING = "Misreporting"
    COMPLETION_IMPACT = "CompletionImpact"
    QUALITY_IMPACT = "QualityImpact"
    UNREASONABLE_INTERVENTION = "UnreasonableIntervention"
