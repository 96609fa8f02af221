import argparse
import logging
import sys
from typing import List, Optional

from app.cli.commands import cmd_price, cmd_solve, cmd_verify
from app.core.config import get_settings

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description=f"{settings.APP_NAME}: 通过障碍问题求解 Root 型 Skorokhod 嵌入",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="求解障碍问题并导出障碍")
    solve.add_argument("config", help="运行配置文件（JSON 或 key = value 文本）")

    verify = sub.add_parser("verify", help="蒙特卡洛检验障碍是否嵌入目标分布")
    verify.add_argument("config")
    verify.add_argument("barrier", help="barrier.csv 路径")

    price = sub.add_parser("price", help="由期权行情计算实现方差期权的下界")
    price.add_argument("market", help="表头为 strike,price 的行情 CSV")
    price.add_argument("--maturity", type=float, required=True)
    price.add_argument("--forward", type=float, required=True)
    price.add_argument("--payoff", default="identity", help="identity、call:K 或 affine:a,b;a,b")
    price.add_argument("--n-paths", type=int, default=None)
    price.add_argument("--seed", type=int, default=None)
    price.add_argument("--n-x", type=int, default=None)
    price.add_argument("--output-dir", default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=get_settings().LOG_LEVEL or "INFO",
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    logger.debug(f"执行子命令 {args.command}")
    if args.command == "solve":
        return cmd_solve(args.config)
    if args.command == "verify":
        return cmd_verify(args.config, args.barrier)
    return cmd_price(args.market, args.maturity, args.forward, args.payoff,
                     n_paths=args.n_paths, seed=args.seed, n_x=args.n_x, output_dir=args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
