"""Policy-sealed publish gate with a hash-chained audit log and quorum amendments."""

from .ekm import Gate, GateState, Mode, OutcomeKind, PublishOutcome
from .egress import Attestation, EgressMediator, attest
from .errors import AegisError, BootHalt
from .eva import ActionProposal, Verdict, validate_action
from .genesis import GenesisLock, HardwareIdentity, declare_genesis, verify_genesis
from .iepl import AmendmentProposal, Edit, Effect, PolicyDocument, PolicyRule, RuleMatch, apply_amendment, seal
from .ilk import IlkWriter, export_cscr, parse_cscr, verify_chain, verify_cscr
from .poc import generate_poc, verify_poc
from .senatus import Senatus, execute_passage, tally
from .state import StateDirectory

__version__ = "0.1.0"

__all__ = [
    "ActionProposal",
    "AegisError",
    "AmendmentProposal",
    "Attestation",
    "BootHalt",
    "Edit",
    "Effect",
    "EgressMediator",
    "Gate",
    "GateState",
    "GenesisLock",
    "HardwareIdentity",
    "IlkWriter",
    "Mode",
    "OutcomeKind",
    "PolicyDocument",
    "PolicyRule",
    "PublishOutcome",
    "RuleMatch",
    "Senatus",
    "StateDirectory",
    "Verdict",
    "apply_amendment",
    "attest",
    "declare_genesis",
    "execute_passage",
    "export_cscr",
    "generate_poc",
    "parse_cscr",
    "seal",
    "tally",
    "validate_action",
    "verify_chain",
    "verify_cscr",
    "verify_genesis",
    "verify_poc",
]
