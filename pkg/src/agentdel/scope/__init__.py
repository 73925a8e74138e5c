"""Controlled-language scoping: parse, compile, review and approve policies."""

from .cnl import CnlStatement, ParseError, parse_cnl, tokenize
from .compiler import (
    Approval,
    ApprovalMismatch,
    CompileDefaults,
    CompileError,
    DuplicateLabel,
    IdentityTranslator,
    PolicyDraft,
    ResourceCatalog,
    Translator,
    UncompiledDraft,
    UnresolvedLabel,
    UnresolvedLabels,
    activate,
    approve,
    compile,
    compile_text,
    draft_hash,
    render_for_review,
    to_cnl,
    translate_freeform,
)

__all__ = [
    "Approval",
    "ApprovalMismatch",
    "CnlStatement",
    "CompileDefaults",
    "CompileError",
    "DuplicateLabel",
    "IdentityTranslator",
    "ParseError",
    "PolicyDraft",
    "ResourceCatalog",
    "Translator",
    "UncompiledDraft",
    "UnresolvedLabel",
    "UnresolvedLabels",
    "activate",
    "approve",
    "compile",
    "compile_text",
    "draft_hash",
    "parse_cnl",
    "render_for_review",
    "to_cnl",
    "tokenize",
    "translate_freeform",
]
