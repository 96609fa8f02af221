"""命令行子命令：solve、verify、price，返回进程退出码"""
import json
import logging
import os
import sys
from datetime import datetime
from typing import Optional

from pydantic import ValidationError

from app.core.config import RunConfig, get_settings, load_run_config
from app.core.errors import ArbitrageDetected, ConfigError, RootBarrierError
from app.services.barrier import RootBarrier, extract_barrier, regularize
from app.services.embed_mc import SdeConfig, simulate_embedding
from app.services.measures import contact_set, default_domain, parse_measure
from app.services.obstacle_pde import Grid, IdentitySigma, sigma_from_config, solve_obstacle
from app.services.pricing import McParams, PdeGridParams, VariancePayoff, ingest_market_csv, variance_bound_lower
from app.services.storage import StorageFactory

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4
EXIT_ARBITRAGE = 5


def _fail(code: int, message: str) -> int:
    print(message, file=sys.stderr)
    return code


def _load(config_path: str):
    config = load_run_config(config_path)
    mu = parse_measure(config.measure_payload("mu"))
    nu = parse_measure(config.measure_payload("nu"))
    sigma = sigma_from_config(config.problem.sigma)
    return config, mu, nu, sigma


def _grid(config: RunConfig, mu, nu, sigma) -> Grid:
    g = config.grid
    if g.a is None:
        a, b = default_domain(nu, mu=mu)
    else:
        a, b = g.a, g.b
    return Grid.resolve(a, b, g.T, n_x=g.n_x, n_t=g.n_t, cfl_ratio=g.cfl_ratio,
                        sigma_max=sigma.sup_abs(a, b, g.T))


def cmd_solve(config_path: str) -> int:
    """求解障碍问题并写出 solution.csv、barrier.csv 与 meta.json"""
    try:
        config, mu, nu, sigma = _load(config_path)
        grid = _grid(config, mu, nu, sigma)
    except (ConfigError, ValidationError, ValueError) as e:
        message = e.describe() if isinstance(e, ConfigError) else f"ConfigError: {e}"
        return _fail(EXIT_CONFIG, message)

    try:
        solution = solve_obstacle(sigma, mu, nu, grid, store=config.grid.store,
                                  contact_tol=config.grid.contact_tol,
                                  cfl_safety=config.grid.cfl_safety)
        barrier = extract_barrier(solution, nu, tol=config.grid.contact_tol)
        contact = contact_set(mu, nu, grid.xs)
        barrier = regularize(barrier, contact)
    except RootBarrierError as e:
        return _fail(EXIT_SOLVER, e.describe())

    stride = config.outputs.solution_stride
    storage = StorageFactory.create_storage("local", base_dir=config.output_dir())
    storage.save_frame(solution.to_frame(stride), "solution.csv")
    storage.save_text(barrier.to_csv(), "barrier.csv")
    meta = solution.meta(stride)
    meta.update({
        "mu": mu.to_json(),
        "nu": nu.to_json(),
        "contact_points": [float(x) for x in contact.points],
        "version": get_settings().APP_VERSION,
    })
    storage.save_json(meta, "meta.json")
    logger.info(f"solve 完成，结果写入 {config.output_dir()}")
    return EXIT_OK


def cmd_verify(config_path: str, barrier_path: str) -> int:
    """模拟到障碍的首次进入时间，按势函数距离判定是否嵌入 nu"""
    try:
        config, mu, nu, sigma = _load(config_path)
        barrier = RootBarrier.read_csv(barrier_path)
    except (ConfigError, ValidationError, ValueError, OSError) as e:
        message = e.describe() if isinstance(e, ConfigError) else f"ConfigError: {e}"
        return _fail(EXIT_CONFIG, message)

    mc = config.mc
    try:
        cfg = SdeConfig(sigma=sigma, initial=mu, dt=mc.dt, t_max=mc.t_max, n_paths=mc.n_paths,
                        seed=get_settings().DEFAULT_SEED if mc.seed is None else mc.seed,
                        log_space=isinstance(sigma, IdentitySigma), lookup=mc.lookup)
        report = simulate_embedding(cfg, barrier, nu=nu)
    except ValidationError as e:
        return _fail(EXIT_CONFIG, f"ConfigError: {e}")
    except RootBarrierError as e:
        return _fail(EXIT_SOLVER, e.describe())

    threshold = config.verify.threshold
    distance = report.potential_distance
    passed = distance is not None and distance <= threshold
    data = report.to_json()
    data.update({"threshold": threshold, "passed": passed,
                 "generated_at": datetime.now().isoformat()})

    storage = StorageFactory.create_storage("local", base_dir=config.output_dir())
    storage.save_json(data, "report.json")
    if config.verify.dump_samples:
        storage.save_frame(report.samples_frame(), "samples.csv")

    if not passed:
        logger.warning(f"嵌入检验未通过: 势函数距离 {distance}, 阈值 {threshold:g}, "
                       f"未停止比例 {report.unstopped_fraction:.4f}")
        return EXIT_VERIFY
    logger.info(f"嵌入检验通过: 势函数距离 {distance:.4f} <= {threshold:g}")
    return EXIT_OK


def cmd_price(market_csv: str, maturity: float, forward: float, payoff: str = "identity",
              n_paths: Optional[int] = None, seed: Optional[int] = None, n_x: Optional[int] = None,
              output_dir: Optional[str] = None) -> int:
    """行情反演、GBM 障碍与方差期权下界，JSON 结果写到标准输出"""
    try:
        parsed = VariancePayoff.parse(payoff)
        spec = ingest_market_csv(market_csv, maturity, forward, parsed)
    except ArbitrageDetected as e:
        return _fail(EXIT_ARBITRAGE, e.describe())
    except RootBarrierError as e:
        return _fail(EXIT_SOLVER, e.describe())
    except (ValidationError, ValueError, OSError) as e:
        return _fail(EXIT_CONFIG, f"ConfigError: {e}")

    grid_params = PdeGridParams() if n_x is None else PdeGridParams(n_x=n_x)
    mc = McParams(seed=seed) if n_paths is None else McParams(n_paths=n_paths, seed=seed)
    try:
        result = variance_bound_lower(spec, grid_params, mc)
    except RootBarrierError as e:
        return _fail(EXIT_SOLVER, e.describe())

    storage = StorageFactory.create_storage("local", base_dir=output_dir or get_settings().OUTPUT_DIR)
    barrier_path = storage.save_text(result.barrier.to_csv(), "price_barrier.csv")
    data = result.to_json(os.path.abspath(barrier_path))
    data.update({"payoff": parsed.describe(), "maturity": maturity, "epsilon": spec.epsilon})
    print(json.dumps(data, sort_keys=True, ensure_ascii=False))
    return EXIT_OK
