import copy
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowactor.core import FlowKey, Proto
from flowactor.nf import (
    DROP,
    AclAction,
    AclRule,
    BuildError,
    Firewall,
    FirewallState,
    Ips,
    LoadBalancer,
    Nat,
    ac_build,
    ac_scan,
    ac_step,
    build_chain,
    build_nf,
)
from flowactor.nf.api import LB_OFFSET, NAT_OFFSET, Action
from flowactor.nf.lb import NO_SERVER
from helpers import key, naive_matches, pkt, random_ac_case

ALL_NFS = ["firewall", "nat", "lb", "ips"]


def _matches(a, chunks):
    node, out, base = 0, [], 0
    for chunk in chunks:
        node, hits = ac_scan(a, node, chunk)
        out.extend((p, base + pos) for p, pos in hits)
        base += len(chunk)
    return sorted(out)


# -- allocate_shared_state / allocate_new_fs ---------------------------------


def test_firewall_shared_state_is_configured_acl():
    nf = build_nf("firewall", {"rules": [{"action": "deny", "dst_port": 80}], "default": "allow"})
    acl = nf.allocate_shared_state()
    assert acl.rules == (AclRule(AclAction.Deny, dst_port=80),)
    assert acl.default is AclAction.Allow


def test_lb_counters_start_at_zero_and_nat_pool_full():
    lb = LoadBalancer([1, 2, 3]).allocate_shared_state()
    assert lb.counters == [0, 0, 0]
    pool = Nat([100, 101], (10, 12)).allocate_shared_state()
    assert pool.capacity == 6 and len(pool.free) == 6 and not pool.used and pool.conserved()


def test_new_flow_state_sentinels():
    assert Ips([b"x"]).allocate_new_fs().node_index == 0
    assert LoadBalancer([1]).allocate_new_fs().server == NO_SERVER
    assert Nat([1]).allocate_new_fs().addr is None


# -- process_pkt -------------------------------------------------------------


def test_firewall_deny_rule_drops_and_empty_acl_forwards():
    k = key(1, port=80)
    fw = Firewall([AclRule(AclAction.Deny, dst_port=80)])
    assert fw.process_pkt(pkt(k, 1), fw.allocate_new_fs(), fw.allocate_shared_state()).action is Action.Drop
    other = key(2, port=443)
    assert fw.process_pkt(pkt(other, 1), fw.allocate_new_fs(), fw.allocate_shared_state()).action is Action.Forward
    open_fw = Firewall()
    assert open_fw.process_pkt(pkt(k, 1), open_fw.allocate_new_fs(), open_fw.allocate_shared_state()).action is Action.Forward


def test_firewall_counts_packets():
    fw = Firewall()
    fs, ss = fw.allocate_new_fs(), fw.allocate_shared_state()
    for i in range(100):
        fw.process_pkt(pkt(key(1), i + 1), fs, ss)
    assert fs.pkt_count == 100 and fs.byte_count == 6400


def test_ips_drops_payload_with_signature():
    ips = Ips([b"attack"])
    ss = ips.allocate_shared_state()
    fs = ips.allocate_new_fs()
    assert ips.process_pkt(pkt(key(1), 1, body=b"hello"), fs, ss).action is Action.Forward
    assert ips.process_pkt(pkt(key(1), 2, body=b"an attack!"), fs, ss).action is Action.Drop
    # once blocked, the flow stays blocked
    assert ips.process_pkt(pkt(key(1), 3, body=b"fine"), fs, ss).action is Action.Drop


def test_ips_matches_across_packets():
    ips = Ips([b"hers"])
    ss, fs = ips.allocate_shared_state(), ips.allocate_new_fs()
    # the pattern is split over the tails of two packets' scanned regions
    p1 = pkt(key(1), 1, size=22, body=b"us")
    assert ips.process_pkt(p1, fs, ss).action is Action.Forward
    p2 = pkt(key(1), 2, size=20)
    p2.payload = p2.payload[:19] + b"hers"
    assert ips.process_pkt(p2, fs, ss).action is Action.Drop


def test_nat_rewrites_source_and_is_stable():
    nat = Nat([0xAC100001], (2000, 2001))
    ss, fs = nat.allocate_shared_state(), nat.allocate_new_fs()
    outs = [nat.process_pkt(pkt(key(1), i), fs, ss).mutated_payload for i in range(1, 6)]
    assert all(o[NAT_OFFSET : NAT_OFFSET + 6] == outs[0][NAT_OFFSET : NAT_OFFSET + 6] for o in outs)
    assert outs[0][NAT_OFFSET : NAT_OFFSET + 6] == (0xAC100001).to_bytes(4, "little") + (2000).to_bytes(2, "little")
    assert fs.address == (0xAC100001, 2000)


def test_nat_capacity_and_reuse_after_expiry():
    nat = Nat([7], (1, 1))
    ss = nat.allocate_shared_state()
    a, b = nat.allocate_new_fs(), nat.allocate_new_fs()
    assert nat.process_pkt(pkt(key(1), 1), a, ss).action is Action.Forward
    assert nat.process_pkt(pkt(key(2), 1), b, ss) is DROP
    nat.flow_expires(a, ss)
    c = nat.allocate_new_fs()
    assert nat.process_pkt(pkt(key(2), 2), c, ss).action is Action.Forward
    assert c.addr == a.addr
    assert ss.conserved()


def test_lb_argmin_with_lowest_index_ties():
    lb = LoadBalancer([11, 22, 33])
    ss = lb.allocate_shared_state()
    fs = lb.allocate_new_fs()
    out = lb.process_pkt(pkt(key(1), 1), fs, ss)
    assert fs.server == 0 and ss.counters == [1, 0, 0]
    assert out.mutated_payload[LB_OFFSET : LB_OFFSET + 4] == (11).to_bytes(4, "little")
    ss.counters = [2, 1, 3]
    fs2 = lb.allocate_new_fs()
    lb.process_pkt(pkt(key(2), 1), fs2, ss)
    assert fs2.server == 1


def test_lb_greedy_spread_oracle():
    lb = LoadBalancer([1, 2, 3])
    ss = lb.allocate_shared_state()
    expected = [0, 0, 0]
    for i in range(10):
        fs = lb.allocate_new_fs()
        lb.process_pkt(pkt(key(i), 1), fs, ss)
        want = min(range(3), key=expected.__getitem__)
        expected[want] += 1
        assert fs.server == want
    assert ss.counters == expected and max(expected) - min(expected) <= 1


# -- lifecycle hooks on shared state ------------------------------------------


@pytest.mark.parametrize("name", ALL_NFS)
def test_deallocate_does_not_touch_shared_state(name):
    nf = build_nf(name, {})
    ss, fs = nf.allocate_shared_state(), nf.allocate_new_fs()
    nf.process_pkt(pkt(key(1), 1), fs, ss)
    before = copy.deepcopy(ss)
    nf.deallocate_fs(fs)
    assert ss == before


def test_lb_migrate_out_then_in_moves_the_counter():
    lb = LoadBalancer([1, 2])
    src, dst = lb.allocate_shared_state(), lb.allocate_shared_state()
    fs = lb.allocate_new_fs()
    lb.process_pkt(pkt(key(1), 1), fs, src)
    lb.flow_migrate_out(fs, src)
    lb.flow_migrate_in(fs, dst)
    assert src.counters == [0, 0] and dst.counters == [1, 0]
    lb.flow_expires(fs, dst)
    assert dst.counters == [0, 0]


def test_nat_migrate_in_to_disjoint_pool_keeps_both_conserved():
    a_nf = build_nf("nat", {}, slot=0)
    b_nf = build_nf("nat", {}, slot=1)
    a, b = a_nf.allocate_shared_state(), b_nf.allocate_shared_state()
    assert not set(a.free) & set(b.free)
    fs = a_nf.allocate_new_fs()
    a_nf.process_pkt(pkt(key(1), 1), fs, a)
    a_nf.flow_migrate_out(fs, a)
    b_nf.flow_migrate_in(fs, b)
    assert a.conserved() and b.conserved()
    assert fs.addr in a.lent and fs.addr in b.foreign and fs.addr in b.held_here()
    # the flow expires on the target: the address goes home only when the lender learns of it
    b_nf.flow_expires(fs, b)
    assert fs.addr not in b.held_here() and b.conserved()


def test_firewall_hooks_are_noops():
    fw = Firewall([AclRule(AclAction.Deny, dst_port=1)])
    ss, fs = fw.allocate_shared_state(), FirewallState(3, 4, 5, 1)
    snapshot = (copy.deepcopy(ss), copy.deepcopy(fs))
    for hook in (fw.flow_expires, fw.flow_migrate_out, fw.flow_migrate_in, fw.flow_recover):
        hook(fs, ss)
    assert (ss, fs) == snapshot


@pytest.mark.parametrize("name", ALL_NFS)
def test_state_codec_round_trips(name):
    nf = build_nf(name, {})
    ss, fs = nf.allocate_shared_state(), nf.allocate_new_fs()
    assert nf.decode_state(nf.encode_state(fs)) == fs
    for i in range(3):
        nf.process_pkt(pkt(key(1), i + 1, body=b"xx"), fs, ss)
        assert nf.decode_state(nf.encode_state(fs)) == fs


def test_chain_builder_names_and_rejects_unknown():
    chain = build_chain(["firewall", "nat", "lb"], {})
    assert chain.name == "firewall->nat->lb" and len(chain) == 3
    with pytest.raises(ValueError):
        build_nf("router", {})


# -- Aho-Corasick -----------------------------------------------------------


def test_ac_classic_example():
    pats = [b"he", b"she", b"his", b"hers"]
    a = ac_build(pats)
    _, hits = ac_scan(a, 0, b"ushers")
    assert sorted({pats[p] for p, _ in hits}) == [b"he", b"hers", b"she"]
    assert sorted(hits) == naive_matches(pats, b"ushers")


def test_ac_overlapping_occurrences():
    a = ac_build([b"aa"])
    assert len(ac_scan(a, 0, b"aaa")[1]) == 2


def test_ac_empty_pattern_set_fails():
    with pytest.raises(BuildError):
        ac_build([])
    with pytest.raises(BuildError):
        ac_build([b""])


def test_ac_step_semantics():
    pats = [b"he", b"she", b"his", b"hers"]
    a = ac_build(pats)
    assert ac_step(a, 0, ord("z")) == (0, frozenset())
    node, _ = ac_scan(a, 0, b"sh")
    node, matched = ac_step(a, node, ord("e"))
    assert {pats[i] for i in matched} == {b"she", b"he"}


def test_ac_cross_packet_scan_equals_concatenation():
    pats = [b"he", b"she", b"his", b"hers"]
    a = ac_build(pats)
    assert _matches(a, [b"us", b"hers"]) == _matches(a, [b"ushers"]) == naive_matches(pats, b"ushers")


def test_ac_against_naive_oracle_2000_cases():
    rng = random.Random(99)
    for _ in range(2000):
        pats, stream, cuts = random_ac_case(rng)
        chunks = [stream[i:j] for i, j in zip([0] + cuts, cuts + [len(stream)])]
        assert _matches(ac_build(pats), chunks) == naive_matches(pats, stream)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.binary(min_size=1, max_size=4), min_size=1, max_size=6),
    st.binary(max_size=80),
    st.lists(st.integers(0, 80), max_size=4),
)
def test_ac_oracle_property(pats, stream, cuts):
    cuts = sorted({c for c in cuts if c <= len(stream)})
    chunks = [stream[i:j] for i, j in zip([0] + cuts, cuts + [len(stream)])]
    assert _matches(ac_build(pats), chunks) == naive_matches(pats, stream)


def test_firewall_denies_by_protocol_rule():
    fw = build_nf("firewall", {"rules": [{"action": "deny", "proto": "udp"}]})
    k = FlowKey(1, 2, Proto.UDP, 3, 4)
    assert fw.process_pkt(pkt(k, 1), fw.allocate_new_fs(), fw.allocate_shared_state()).action is Action.Drop
