from .distributor import SiteUnavailableMarker, distribute_global, split_parts
from .doc import OPS, And, Atom, Join, Or, QueryDoc, conjunction, disjunction, parse_query, serialize_query
from .results import ResultDoc, ResultSet, merge_results, parse_result_doc, translate_results
from .sql import SqlPlan, execute_local, translate_query

__all__ = [
    "OPS", "And", "Atom", "Join", "Or", "QueryDoc", "ResultDoc", "ResultSet", "SiteUnavailableMarker",
    "SqlPlan", "conjunction", "disjunction", "distribute_global", "execute_local", "merge_results",
    "parse_query", "parse_result_doc", "serialize_query", "split_parts", "translate_query",
    "translate_results",
]
