import pytest

from flowactor.actors import LifecycleError, Mode
from flowactor.core import ActorMessage, FlowStateBundle, MsgKind, Replication, RpcCall
from flowactor.nf import build_chain
from flowactor.runtime import Runtime, RuntimeConfig
from flowactor.sim import NS_PER_MS, NS_PER_S
from flowactor.transport import Channel
from helpers import Net, key, pkt, runtime_member

CHAIN = ["firewall", "nat", "lb"]


def make_rt(net=None, rid=2, **cfg):
    net = net or Net()
    rt = Runtime(rid, net, build_chain(CHAIN, {}, slot=rid), RuntimeConfig(**cfg))
    net.add(rt)
    return net, rt


def frame_from(peer: int, dst: int, msg: ActorMessage):
    ch = Channel(peer, dst)
    ch.send_reliable(msg)
    return ch.outbox[0]


def rpc(rt, method, **args):
    rt.handle_rpc(ActorMessage(MsgKind.Rpc, 0, rt.id, None, 1, RpcCall(method, args)))


def count_calls(rt):
    calls = []
    for nf in rt.chain.nfs:
        orig = nf.process_pkt

        def wrapped(p, fs, ss, _orig=orig, _name=nf.name):
            calls.append(_name)
            return _orig(p, fs, ss)

        nf.process_pkt = wrapped
    return calls


# -- scheduler_tick ------------------------------------------------------------


def test_idle_tick_makes_no_progress():
    _, rt = make_rt()
    assert rt.scheduler_tick() is False


def test_one_queued_packet_gives_one_verdict_per_tick():
    net, rt = make_rt()
    rt.receive(99, pkt(key(1), 1))
    assert rt.scheduler_tick() is True
    assert len(net.emitted) == 1 and not rt.input_port


def test_dataplane_runs_before_control_in_the_same_tick():
    net, rt = make_rt()
    order = []
    orig_dp, orig_deliver = rt.on_dataplane_packet, rt.deliver
    rt.on_dataplane_packet = lambda p, s, i: (order.append("packet"), orig_dp(p, s, i))
    rt.deliver = lambda m, i: (order.append(m.kind.name), orig_deliver(m, i))
    rt.receive(9, frame_from(9, rt.id, ActorMessage(MsgKind.Heartbeat, 9, rt.id, None, 42)))
    rt.receive(99, pkt(key(1), 1))
    rt.scheduler_tick()
    assert order == ["packet", "Heartbeat"]
    acks = [f for f in rt.transport.channel(9).outbox]
    assert len(acks) == 1


# -- on_dataplane_packet -------------------------------------------------------


def test_first_packet_creates_one_actor():
    _, rt = make_rt(pool_capacity=10)
    rt.receive(99, pkt(key(1), 1))
    rt.scheduler_tick()
    assert rt.pool.free == 9 and len(rt.flows) == 1


def test_three_flows_five_packets_each():
    _, rt = make_rt()
    calls = count_calls(rt)
    for seq in range(1, 6):
        for i in range(3):
            rt.receive(99, pkt(key(i), seq))
    rt.scheduler_tick()
    assert len(rt.flows) == 3
    assert calls.count("firewall") == 15 and len(calls) == 45


def test_pool_overflow_drops_the_packet():
    net, rt = make_rt(pool_capacity=2)
    for i in range(3):
        rt.receive(99, pkt(key(i), 1))
    rt.scheduler_tick()
    assert rt.dropped_packets == 1 and rt.counters.pool_exhausted == 1
    assert [r for _, _, r, _ in net.drops] == ["overload"]


def test_input_queue_overflow_is_an_overload_drop():
    net, rt = make_rt(input_capacity=4)
    for i in range(6):
        rt.receive(99, pkt(key(1), i + 1))
    assert rt.dropped_packets == 2 and len(rt.input_port) == 4


# -- create_flow_actor ---------------------------------------------------------


def test_replica_targets_round_robin():
    net, rt = make_rt()
    net.set_cfg([runtime_member(2), runtime_member(3), runtime_member(4)])
    rpc(rt, "set_replicas", replicas=[3, 4])
    targets = [rt.create_flow_actor(key(i)).replica_target for i in range(3)]
    assert targets == [3, 4, 3]


def test_no_replicas_means_no_replica_target():
    _, rt = make_rt()
    assert rt.create_flow_actor(key(1)).replica_target is None


def test_set_replicas_rejects_self_and_unknown_ids():
    net, rt = make_rt()
    net.set_cfg([runtime_member(2), runtime_member(3)])
    rpc(rt, "set_replicas", replicas=[2])
    rpc(rt, "set_replicas", replicas=[7])
    assert rt.replica_list == []
    rpc(rt, "set_replicas", replicas=[])
    assert rt.create_flow_actor(key(1)).replica_target is None


def test_recreated_flow_starts_from_fresh_states():
    net, rt = make_rt(expiry_timeout_ns=NS_PER_S)
    rt.receive(99, pkt(key(1), 1))
    net.run(NS_PER_MS)
    first = rt.encode_bundle(rt.flows[key(1)])
    net.sim.at(3 * NS_PER_S, rt.receive, 99, pkt(key(1), 1))
    net.run(3 * NS_PER_S + NS_PER_MS)
    assert rt.counters.expired == 1
    again = rt.encode_bundle(rt.flows[key(1)])
    assert again == first


# -- expire_sweep ---------------------------------------------------------------


def test_idle_flow_expires_after_timeout():
    net, rt = make_rt(expiry_timeout_ns=5 * NS_PER_S)
    rt.receive(99, pkt(key(1), 1))
    net.run(5 * NS_PER_S)
    assert key(1) in rt.flows
    net.run(5_100 * NS_PER_MS)
    assert key(1) not in rt.flows and rt.counters.expired == 1


def test_flow_fed_every_second_never_expires():
    net, rt = make_rt(expiry_timeout_ns=5 * NS_PER_S)
    for s in range(20):
        net.sim.at(s * NS_PER_S, rt.receive, 99, pkt(key(1), s + 1))
    net.run(20 * NS_PER_S)
    assert key(1) in rt.flows and rt.counters.expired == 0


def test_nat_expiry_returns_the_address_and_lb_counter():
    net, rt = make_rt(expiry_timeout_ns=NS_PER_S)
    nat = rt.shared_states[CHAIN.index("nat")]
    lb = rt.shared_states[CHAIN.index("lb")]
    rt.receive(99, pkt(key(1), 1))
    net.run(NS_PER_MS)
    assert len(nat.used) == 1 and sum(lb.counters) == 1
    net.run(3 * NS_PER_S)
    assert not nat.used and nat.conserved() and sum(lb.counters) == 0


def test_deallocate_runs_once_per_actor_and_double_call_is_caught():
    net, rt = make_rt(expiry_timeout_ns=NS_PER_S)
    for i in range(5):
        rt.receive(99, pkt(key(i), 1))
    net.run(NS_PER_MS)
    actor = rt.flows[key(0)]
    net.run(3 * NS_PER_S)
    assert rt.counters.deallocs == 5 == rt.counters.expired
    actor.released = True
    actor.deallocated = True
    with pytest.raises(LifecycleError):
        rt._deallocate(actor)


def test_deallocate_before_release_is_caught():
    _, rt = make_rt()
    actor = rt.create_flow_actor(key(1))
    with pytest.raises(LifecycleError):
        rt._deallocate(actor)


# -- liaison ----------------------------------------------------------------------


def test_migration_create_request_builds_target_actor():
    net, rt = make_rt()
    net.set_cfg([runtime_member(2), runtime_member(3)])
    rt.receive(3, frame_from(3, 2, ActorMessage(MsgKind.MigrationCreateReq, 3, 2, key(1), 77)))
    rt.scheduler_tick()
    actor = rt.flows[key(1)]
    assert actor.mode is Mode.MigrationTarget
    out = rt.transport.channel(3).outbox
    assert out and out[-1].payload  # the MigrationCreateResp is queued to the source


def test_replication_data_creates_replica_and_emits():
    net, rt = make_rt()
    net.set_cfg([runtime_member(2), runtime_member(3)])
    bundle = FlowStateBundle(rt.chain.name, tuple(nf.encode_state(nf.allocate_new_fs()) for nf in rt.chain.nfs))
    p = pkt(key(1), 1)
    rt.receive(3, frame_from(3, 2, ActorMessage(MsgKind.ReplicationData, 3, 2, key(1), 0, Replication(p, bundle, 1))))
    rt.scheduler_tick()
    rep = rt.replicas[key(1)]
    assert rep.mode is Mode.Replica and rep.replica.states == bundle
    assert [e[2].gen_seq for e in net.emitted] == [1]


def test_heartbeat_ack_keeps_the_correlation_id():
    net, rt = make_rt()
    net.add(probe := _Recorder(9, net))
    net.fabric.send(9, 2, frame_from(9, 2, ActorMessage(MsgKind.Heartbeat, 9, 2, None, 4242)))
    net.run(NS_PER_MS)
    assert [(m.kind, m.correlation_id) for m in probe.got] == [(MsgKind.HeartbeatAck, 4242)]


class _Recorder(Runtime):
    def __init__(self, rid, net):
        super().__init__(rid, net, build_chain(["firewall"], {}))
        self.got = []

    def deliver(self, msg, idx):
        self.got.append(msg)


def test_poll_workload_reports_nonnegative_fields():
    net, rt = make_rt()
    for i in range(4):
        rt.receive(99, pkt(key(i), 1))
    net.run(NS_PER_MS)
    w = rt.workload()
    assert w.active_flows == 4 and w.dropped_packets == 0 and w.throughput_pps >= 0
