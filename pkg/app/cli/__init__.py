from .commands import cmd_price, cmd_solve, cmd_verify

__all__ = ["cmd_solve", "cmd_verify", "cmd_price"]
