from conftest import cli_invoker
from mgvo.federation import SimFederation
from mgvo.localcluster import LocalCluster
from mgvo.scenario import normalized, run_scenario


def test_scenario_same_over_sim_and_sockets(tmp_path):
    sites = ("addenbrookes", "oxford", "udine")
    with SimFederation(tmp_path / "sim", sites=sites, seed=0, vo_secret=b"mgvo-central-secret") as fed:
        sim_log = run_scenario(cli_invoker(fed.client()), {s: s for s in sites}, fed.vo_secret,
                               tmp_path / "sim-work")
    with LocalCluster(tmp_path / "sock", sites=sites) as cluster:
        sock_log = run_scenario(cli_invoker(), cluster.addresses, cluster.vo_secret, tmp_path / "sock-work")
    assert [e["step"] for e in sim_log] == [e["step"] for e in sock_log]
    assert normalized(sim_log) == normalized(sock_log)
