import json
import os
from abc import ABC, abstractmethod
from typing import Any

import pandas as pd


class StorageBackend(ABC):
    """产物存储的抽象基类"""

    @abstractmethod
    def save_file(self, file_content: bytes, file_path: str) -> str:
        """
        保存文件

        Args:
            file_content: 文件内容
            file_path: 相对路径

        Returns:
            str: 保存后的完整路径
        """
        pass

    def save_text(self, text: str, file_path: str) -> str:
        return self.save_file(text.encode("utf-8"), file_path)

    def save_json(self, data: Any, file_path: str) -> str:
        """JSON 按键排序输出，相同输入得到相同字节"""
        text = json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False)
        return self.save_text(text + "\n", file_path)

    def save_frame(self, frame: pd.DataFrame, file_path: str) -> str:
        return self.save_text(frame.to_csv(index=False, lineterminator="\n"), file_path)


class LocalStorageBackend(StorageBackend):
    """本地文件系统存储"""

    def __init__(self, base_dir: str = "outputs"):
        self.base_dir = base_dir
        os.makedirs(self.base_dir, exist_ok=True)

    def save_file(self, file_content: bytes, file_path: str) -> str:
        full_path = os.path.join(self.base_dir, file_path)
        os.makedirs(os.path.dirname(full_path) or ".", exist_ok=True)
        with open(full_path, "wb") as f:
            f.write(file_content)
        return full_path


class StorageFactory:
    """存储后端工厂"""

    @staticmethod
    def create_storage(storage_type: str, **kwargs) -> StorageBackend:
        if storage_type.lower() == "local":
            return LocalStorageBackend(**kwargs)
        raise ValueError(f"不支持的存储类型: {storage_type}")
