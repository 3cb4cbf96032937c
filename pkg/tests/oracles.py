"""Independent brute-force readings of the Declare templates, used as test oracles."""

from nspad.declare import Template


def fol_holds(template: Template, a: str, b: str | None, t: tuple[str, ...]) -> bool:
    """Position-by-position reading of each template's first-order form."""
    n = len(t)
    P = range(n)
    some_a = any(t[i] == a for i in P)
    some_b = any(t[i] == b for i in P)
    response = all(any(t[j] == b for j in range(i + 1, n)) for i in P if t[i] == a)
    precedence = all(any(t[j] == a for j in range(i)) for i in P if t[i] == b)
    chain = all((i + 1 < n) and t[i + 1] == b for i in P if t[i] == a)
    return {
        Template.EXISTENCE: some_a,
        Template.RESPONDED_EXISTENCE: (not some_a) or some_b,
        Template.RESPONSE: response,
        Template.PRECEDENCE: precedence,
        Template.SUCCESSION: response and precedence,
        Template.CHAIN_RESPONSE: chain,
        Template.CHOICE: some_a or some_b,
        Template.EXCLUSIVE_CHOICE: (some_a or some_b) and not (some_a and some_b),
    }[template]


def fol_activated(template: Template, a: str, b: str | None, t) -> bool:
    if template in (Template.RESPONSE, Template.CHAIN_RESPONSE, Template.RESPONDED_EXISTENCE):
        return a in t
    if template is Template.PRECEDENCE:
        return b in t
    if template is Template.SUCCESSION:
        return a in t or b in t
    return False
