"""
异常定义模块
"""
from typing import Dict, Optional


class CGMError(Exception):
    """框架异常基类"""
    def __init__(self, message: str = "CGM运行错误", original_error: Exception = None):
        self.message = message
        self.original_error = original_error
        super().__init__(self.message)


class ConfigurationError(CGMError):
    """配置不合法（网络尺寸、环境标签、参数范围等）"""


class ShapeError(CGMError):
    """向量/矩阵维度不匹配"""


class NumericError(CGMError):
    """出现NaN/Inf"""
    def __init__(self, message: str = "数值异常", diagnostics: Optional[Dict] = None,
                 original_error: Exception = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message, original_error)


class EpisodeOverrunError(CGMError):
    """回合已到达时限T后继续step"""


class EpisodeValidationError(CGMError):
    """回合记录不合法"""


class EmptyStoreError(CGMError):
    """回放缓冲区为空"""


class InputError(CGMError):
    """输入文件缺失或格式错误"""
