"""Subject-language frontend: lexing, parsing, graphs, unparsing."""
from .lexer import LexError, Origin, SourceUnit, Token, TokenKind, lex, untokenize
from .syntax import ParseError, SynNode, SyntaxTree, parse, parse_text
from .vocab import NodeVocab, VocabError, default_vocab, ident_bucket
from .graphs import (
    EdgeKind, GEdge, GNode, GraphDoc, GraphInvariantError, GraphKind, UnsupportedConstruct,
    build_ast, build_cfg, build_dfg, build_graph, featurize, reaching_definitions,
    stmt_label, to_dot,
)
from .unparse import MalformedAst, unparse


def graphs_for(unit, vocab=None):
    """Parse ``unit`` and return (tree, ast, cfg, dfg)."""
    vocab = vocab or default_vocab()
    tree = parse(lex(unit))
    cfg = build_cfg(tree, vocab)
    return tree, build_ast(tree, vocab), cfg, build_dfg(tree, vocab, cfg)
