"""Install classid-keyed firewall rules into a (shared) network namespace.

Each sandbox owns one inet table named after it, so teardown is a single
table deletion and never touches rules that belong to anyone else.
"""

import socket

from plugcell.kernel import nft
from plugcell.kernel.nsexec import run_in_ns
from plugcell.policy.model import Direction, Verdict

FETCH_TAG = b"fetch-window"
_PROTO = {"tcp": socket.IPPROTO_TCP, "udp": socket.IPPROTO_UDP}


def table_name(sandbox_id):
    return f"plugcell_{sandbox_id}"


def _endpoint_match(ep, outbound):
    exprs = []
    host = "127.0.0.1" if ep.host == "localhost" else ep.host
    if outbound:
        exprs += nft.match_ipv4_daddr(host)
    else:
        exprs += nft.match_ipv4_saddr(host)
    exprs += nft.match_l4proto(_PROTO[ep.proto])
    exprs += nft.match_dport(ep.port) if outbound else nft.match_sport(ep.port)
    return exprs


def compile_rule(rule):
    """Translate one abstract rule into (chain, expressions) pairs.

    An outbound ACCEPT gets a mirrored inbound ACCEPT for its reply traffic:
    packets arriving for an established sandbox socket carry that socket's
    classid, so without the mirror the IN drop would eat every reply.
    """
    base = nft.match_cgroup_classid(rule.classid)
    code = nft.NF_ACCEPT if rule.verdict is Verdict.ACCEPT else nft.NF_DROP
    out = []
    directions = [rule.direction]
    if rule.verdict is Verdict.ACCEPT and rule.direction is Direction.OUT:
        directions.append(Direction.IN)
    for direction in directions:
        outbound = direction is Direction.OUT
        exprs = list(base)
        if rule.loopback:
            exprs += nft.match_oifname("lo") if outbound else nft.match_iifname("lo")
        if rule.destination is not None:
            exprs += _endpoint_match(rule.destination, outbound)
        exprs += [nft.counter(), nft.verdict(code)]
        out.append(("out" if outbound else "in", exprs))
    return out


def _install(table, rules, tag):
    msgs = []
    with nft.NftSocket() as nl:
        msgs.append(nl.add_table(table))
        msgs.append(nl.add_base_chain(table, "out", nft.NF_INET_LOCAL_OUT))
        msgs.append(nl.add_base_chain(table, "in", nft.NF_INET_LOCAL_IN))
        for rule in rules:
            for chain, exprs in compile_rule(rule):
                msgs.append(nl.add_rule(table, chain, exprs, userdata=tag))
        nl.batch(msgs)
    return True


def _delete(table):
    with nft.NftSocket() as nl:
        if table not in nl.tables():
            return False
        nl.batch([nl.del_table(table)])
    return True


def _insert_exceptions(table, rules):
    with nft.NftSocket() as nl:
        msgs = []
        # inserted at the chain head, reverse order keeps them in list order
        for rule in reversed(rules):
            for chain, exprs in compile_rule(rule):
                msgs.append(nl.add_rule(table, chain, exprs, userdata=FETCH_TAG, insert=True))
        nl.batch(msgs)
    return True


def _remove_tagged(table, tag):
    with nft.NftSocket() as nl:
        if table not in nl.tables():
            return 0
        doomed = [r for r in nl.rules(table) if r.get("userdata") == tag]
        if doomed:
            nl.batch([nl.del_rule(table, r["chain"], r["handle"]) for r in doomed])
        return len(doomed)


def _list(table):
    with nft.NftSocket() as nl:
        if table not in nl.tables():
            return []
        return [(r["chain"], r.get("userdata", b"")) for r in nl.rules(table)]


def install(netns, sandbox_id, rules):
    """``netns`` is {"net": fd} or a pid whose net namespace to use."""
    return run_in_ns(netns, ["net"], _install, table_name(sandbox_id), list(rules),
                     sandbox_id.encode())


def remove(netns, sandbox_id):
    return run_in_ns(netns, ["net"], _delete, table_name(sandbox_id))


def open_window(netns, sandbox_id, rules):
    return run_in_ns(netns, ["net"], _insert_exceptions, table_name(sandbox_id), list(rules))


def close_window(netns, sandbox_id):
    return run_in_ns(netns, ["net"], _remove_tagged, table_name(sandbox_id), FETCH_TAG)


def installed(netns, sandbox_id):
    return run_in_ns(netns, ["net"], _list, table_name(sandbox_id))


def snapshot(netns):
    return run_in_ns(netns, ["net"], nft.ruleset_snapshot)
