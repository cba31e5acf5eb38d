# 测试模块初始化文件
