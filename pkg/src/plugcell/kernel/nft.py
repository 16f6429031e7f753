"""Minimal nf_tables client speaking nfnetlink directly.

Only what the sandbox firewall needs: tables, base chains on the inet
input/output hooks, and rules built from meta/cmp/payload/immediate
expressions.  Rules carry an opaque userdata tag so a sandbox's rules can be
found and removed without tracking kernel handles.
"""

import errno
import os
import socket
import struct

NETLINK_NETFILTER = 12

NLM_F_REQUEST = 0x01
NLM_F_MULTI = 0x02
NLM_F_ACK = 0x04
NLM_F_ROOT = 0x100
NLM_F_MATCH = 0x200
NLM_F_DUMP = NLM_F_ROOT | NLM_F_MATCH
NLM_F_EXCL = 0x200
NLM_F_CREATE = 0x400
NLM_F_APPEND = 0x800

NLMSG_ERROR = 2
NLMSG_DONE = 3
NFNL_MSG_BATCH_BEGIN = 0x10
NFNL_MSG_BATCH_END = 0x11
NFNL_SUBSYS_NFTABLES = 10

NFT_MSG_NEWTABLE = 0
NFT_MSG_GETTABLE = 1
NFT_MSG_DELTABLE = 2
NFT_MSG_NEWCHAIN = 3
NFT_MSG_GETCHAIN = 4
NFT_MSG_NEWRULE = 6
NFT_MSG_GETRULE = 7
NFT_MSG_DELRULE = 8

NFPROTO_INET = 1
NFPROTO_IPV4 = 2
NFPROTO_IPV6 = 10

NF_INET_LOCAL_IN = 1
NF_INET_LOCAL_OUT = 3
NF_DROP = 0
NF_ACCEPT = 1

NLA_F_NESTED = 0x8000

# attribute ids
NFTA_TABLE_NAME = 1
NFTA_TABLE_FLAGS = 2
NFTA_CHAIN_TABLE = 1
NFTA_CHAIN_NAME = 3
NFTA_CHAIN_HOOK = 4
NFTA_CHAIN_POLICY = 5
NFTA_CHAIN_TYPE = 7
NFTA_HOOK_HOOKNUM = 1
NFTA_HOOK_PRIORITY = 2
NFTA_RULE_TABLE = 1
NFTA_RULE_CHAIN = 2
NFTA_RULE_HANDLE = 3
NFTA_RULE_EXPRESSIONS = 4
NFTA_RULE_USERDATA = 7
NFTA_LIST_ELEM = 1
NFTA_EXPR_NAME = 1
NFTA_EXPR_DATA = 2
NFTA_META_DREG = 1
NFTA_META_KEY = 2
NFTA_CMP_SREG = 1
NFTA_CMP_OP = 2
NFTA_CMP_DATA = 3
NFTA_DATA_VALUE = 1
NFTA_DATA_VERDICT = 2
NFTA_VERDICT_CODE = 1
NFTA_PAYLOAD_DREG = 1
NFTA_PAYLOAD_BASE = 2
NFTA_PAYLOAD_OFFSET = 3
NFTA_PAYLOAD_LEN = 4
NFTA_IMMEDIATE_DREG = 1
NFTA_IMMEDIATE_DATA = 2

NFT_REG_VERDICT = 0
NFT_REG_1 = 1
NFT_CMP_EQ = 0

NFT_META_OIFNAME = 7
NFT_META_IIFNAME = 6
NFT_META_NFPROTO = 15
NFT_META_L4PROTO = 16
NFT_META_CGROUP = 23

NFT_PAYLOAD_NETWORK_HEADER = 1
NFT_PAYLOAD_TRANSPORT_HEADER = 2


class NftError(OSError):
    pass


# -- attribute encoding -------------------------------------------------------

def _pad(data):
    return data + b"\0" * ((4 - len(data) % 4) % 4)


def attr(kind, payload, nested=False):
    if nested:
        kind |= NLA_F_NESTED
    return _pad(struct.pack("=HH", 4 + len(payload), kind) + payload)


def attr_str(kind, value):
    return attr(kind, value.encode() + b"\0")


def attr_be32(kind, value):
    return attr(kind, struct.pack(">I", value & 0xFFFFFFFF))


def attr_nest(kind, *children):
    return attr(kind, b"".join(children), nested=True)


def parse_attrs(data):
    """Decode a flat attribute blob into a list of (type, payload) pairs."""
    out = []
    off = 0
    while off + 4 <= len(data):
        length, kind = struct.unpack_from("=HH", data, off)
        if length < 4:
            break
        out.append((kind & ~NLA_F_NESTED & 0x7FFF, data[off + 4:off + length]))
        off += (length + 3) & ~3
    return out


# -- expressions --------------------------------------------------------------

def _expr(name, *data_attrs):
    return attr_nest(
        NFTA_LIST_ELEM,
        attr_str(NFTA_EXPR_NAME, name),
        attr_nest(NFTA_EXPR_DATA, *data_attrs),
    )


def meta(key, dreg=NFT_REG_1):
    return _expr("meta", attr_be32(NFTA_META_DREG, dreg), attr_be32(NFTA_META_KEY, key))


def cmp_eq(value, sreg=NFT_REG_1):
    return _expr(
        "cmp",
        attr_be32(NFTA_CMP_SREG, sreg),
        attr_be32(NFTA_CMP_OP, NFT_CMP_EQ),
        attr_nest(NFTA_CMP_DATA, attr(NFTA_DATA_VALUE, value)),
    )


def payload(base, offset, length, dreg=NFT_REG_1):
    return _expr(
        "payload",
        attr_be32(NFTA_PAYLOAD_DREG, dreg),
        attr_be32(NFTA_PAYLOAD_BASE, base),
        attr_be32(NFTA_PAYLOAD_OFFSET, offset),
        attr_be32(NFTA_PAYLOAD_LEN, length),
    )


def verdict(code):
    return _expr(
        "immediate",
        attr_be32(NFTA_IMMEDIATE_DREG, NFT_REG_VERDICT),
        attr_nest(
            NFTA_IMMEDIATE_DATA,
            attr_nest(NFTA_DATA_VERDICT, attr_be32(NFTA_VERDICT_CODE, code)),
        ),
    )


def counter():
    return _expr("counter")


def match_cgroup_classid(classid):
    # meta cgroup loads the socket's net_cls classid in host byte order
    return [meta(NFT_META_CGROUP), cmp_eq(struct.pack("=I", classid))]


def match_ipv4_daddr(addr):
    return [
        meta(NFT_META_NFPROTO),
        cmp_eq(bytes([NFPROTO_IPV4])),
        payload(NFT_PAYLOAD_NETWORK_HEADER, 16, 4),
        cmp_eq(socket.inet_aton(addr)),
    ]


def match_ipv4_saddr(addr):
    return [
        meta(NFT_META_NFPROTO),
        cmp_eq(bytes([NFPROTO_IPV4])),
        payload(NFT_PAYLOAD_NETWORK_HEADER, 12, 4),
        cmp_eq(socket.inet_aton(addr)),
    ]


def match_l4proto(proto):
    return [meta(NFT_META_L4PROTO), cmp_eq(bytes([proto]))]


def match_dport(port):
    return [payload(NFT_PAYLOAD_TRANSPORT_HEADER, 2, 2), cmp_eq(struct.pack(">H", port))]


def match_sport(port):
    return [payload(NFT_PAYLOAD_TRANSPORT_HEADER, 0, 2), cmp_eq(struct.pack(">H", port))]


def _ifname(name):
    raw = name.encode()
    return raw + b"\0" * (16 - len(raw))


def match_oifname(name):
    return [meta(NFT_META_OIFNAME), cmp_eq(_ifname(name))]


def match_iifname(name):
    return [meta(NFT_META_IIFNAME), cmp_eq(_ifname(name))]


# -- socket -------------------------------------------------------------------

class NftSocket:
    """One nfnetlink socket bound to the caller's current network namespace."""

    def __init__(self):
        self.sock = socket.socket(socket.AF_NETLINK, socket.SOCK_RAW, NETLINK_NETFILTER)
        self.sock.bind((0, 0))
        self.seq = 1

    def close(self):
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _msg(self, msg_type, flags, family, body, subsys=NFNL_SUBSYS_NFTABLES):
        seq = self.seq
        self.seq += 1
        if msg_type in (NFNL_MSG_BATCH_BEGIN, NFNL_MSG_BATCH_END):
            full_type = msg_type
            res_id = NFNL_SUBSYS_NFTABLES
        else:
            full_type = (subsys << 8) | msg_type
            res_id = 0
        nfgen = struct.pack("=BBH", family, 0, socket.htons(res_id))
        payload_ = nfgen + body
        hdr = struct.pack("=IHHII", 16 + len(payload_), full_type, flags, seq, 0)
        return seq, hdr + payload_

    def _recv_all(self):
        return self.sock.recv(1 << 20)

    def batch(self, messages):
        """Send (msg_type, flags, family, body) messages as one atomic batch."""
        chunks = []
        _, begin = self._msg(NFNL_MSG_BATCH_BEGIN, NLM_F_REQUEST, 0, b"")
        chunks.append(begin)
        pending = set()
        for msg_type, flags, family, body in messages:
            seq, raw = self._msg(msg_type, flags | NLM_F_REQUEST | NLM_F_ACK, family, body)
            pending.add(seq)
            chunks.append(raw)
        _, end = self._msg(NFNL_MSG_BATCH_END, NLM_F_REQUEST, 0, b"")
        chunks.append(end)
        self.sock.send(b"".join(chunks))
        error = None
        while pending:
            data = self._recv_all()
            for msg_type, _flags, seq, body in _split_messages(data):
                if msg_type == NLMSG_ERROR:
                    (code,) = struct.unpack_from("=i", body, 0)
                    pending.discard(seq)
                    if code < 0 and error is None:
                        error = -code
            if error is not None:
                break
        if error is not None:
            raise NftError(error, f"nf_tables batch failed: {os.strerror(error)}")

    def dump(self, msg_type, family=NFPROTO_INET, body=b""):
        seq, raw = self._msg(msg_type, NLM_F_REQUEST | NLM_F_DUMP | NLM_F_ACK, family, body)
        self.sock.send(raw)
        results = []
        while True:
            data = self._recv_all()
            done = False
            for mtype, _flags, mseq, mbody in _split_messages(data):
                if mseq != seq:
                    continue
                if mtype == NLMSG_DONE:
                    done = True
                elif mtype == NLMSG_ERROR:
                    (code,) = struct.unpack_from("=i", mbody, 0)
                    if code < 0:
                        raise NftError(-code, f"nf_tables dump failed: {os.strerror(-code)}")
                    done = True
                else:
                    fam = mbody[0]
                    results.append((fam, parse_attrs(mbody[4:])))
            if done:
                return results

    # -- high level ---------------------------------------------------------

    def add_table(self, name, family=NFPROTO_INET):
        return (NFT_MSG_NEWTABLE, NLM_F_CREATE, family,
                attr_str(NFTA_TABLE_NAME, name) + attr_be32(NFTA_TABLE_FLAGS, 0))

    def del_table(self, name, family=NFPROTO_INET):
        return (NFT_MSG_DELTABLE, 0, family, attr_str(NFTA_TABLE_NAME, name))

    def add_base_chain(self, table, name, hooknum, priority=0, policy=NF_ACCEPT,
                       family=NFPROTO_INET):
        body = (
            attr_str(NFTA_CHAIN_TABLE, table)
            + attr_str(NFTA_CHAIN_NAME, name)
            + attr_nest(
                NFTA_CHAIN_HOOK,
                attr_be32(NFTA_HOOK_HOOKNUM, hooknum),
                attr_be32(NFTA_HOOK_PRIORITY, priority),
            )
            + attr_be32(NFTA_CHAIN_POLICY, policy)
            + attr_str(NFTA_CHAIN_TYPE, "filter")
        )
        return (NFT_MSG_NEWCHAIN, NLM_F_CREATE, family, body)

    def add_rule(self, table, chain, expressions, userdata=b"", insert=False,
                 family=NFPROTO_INET):
        body = attr_str(NFTA_RULE_TABLE, table) + attr_str(NFTA_RULE_CHAIN, chain)
        body += attr_nest(NFTA_RULE_EXPRESSIONS, *expressions)
        if userdata:
            body += attr(NFTA_RULE_USERDATA, userdata)
        flags = NLM_F_CREATE if insert else NLM_F_CREATE | NLM_F_APPEND
        return (NFT_MSG_NEWRULE, flags, family, body)

    def del_rule(self, table, chain, handle, family=NFPROTO_INET):
        body = (
            attr_str(NFTA_RULE_TABLE, table)
            + attr_str(NFTA_RULE_CHAIN, chain)
            + attr(NFTA_RULE_HANDLE, struct.pack(">Q", handle))
        )
        return (NFT_MSG_DELRULE, 0, family, body)

    def tables(self, family=NFPROTO_INET):
        names = []
        for _fam, attrs in self.dump(NFT_MSG_GETTABLE, family):
            for kind, value in attrs:
                if kind == NFTA_TABLE_NAME:
                    names.append(value.rstrip(b"\0").decode())
        return names

    def rules(self, table=None, family=NFPROTO_INET):
        """Return dicts with table, chain, handle, userdata, expressions bytes."""
        body = attr_str(NFTA_RULE_TABLE, table) if table else b""
        out = []
        for fam, attrs in self.dump(NFT_MSG_GETRULE, family, body):
            rec = {"family": fam}
            for kind, value in attrs:
                if kind == NFTA_RULE_TABLE:
                    rec["table"] = value.rstrip(b"\0").decode()
                elif kind == NFTA_RULE_CHAIN:
                    rec["chain"] = value.rstrip(b"\0").decode()
                elif kind == NFTA_RULE_HANDLE:
                    rec["handle"] = struct.unpack(">Q", value)[0]
                elif kind == NFTA_RULE_USERDATA:
                    rec["userdata"] = value
                elif kind == NFTA_RULE_EXPRESSIONS:
                    rec["expressions"] = value
            if table is None or rec.get("table") == table:
                out.append(rec)
        return out


def _split_messages(data):
    off = 0
    while off + 16 <= len(data):
        length, mtype, flags, seq, _pid = struct.unpack_from("=IHHII", data, off)
        if length < 16:
            break
        yield mtype, flags, seq, data[off + 16:off + length]
        off += (length + 3) & ~3


def ruleset_snapshot():
    """Canonical text of every nf_tables object in the current netns.

    Handles are excluded so two snapshots compare equal when the same
    objects exist, regardless of allocation order.
    """
    lines = []
    with NftSocket() as nl:
        for family in (NFPROTO_INET, NFPROTO_IPV4, NFPROTO_IPV6):
            try:
                tables = nl.tables(family)
            except NftError as exc:
                if exc.errno in (errno.EAFNOSUPPORT, errno.ENOENT):
                    continue
                raise
            for table in sorted(tables):
                lines.append(f"table {family} {table}")
                for rule in nl.rules(table, family):
                    lines.append(
                        f"  rule {rule.get('chain')} "
                        f"{rule.get('expressions', b'').hex()} "
                        f"{rule.get('userdata', b'').hex()}"
                    )
    return "\n".join(lines)
