import os

from dotenv import load_dotenv
from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker
from sqlalchemy.pool import StaticPool

load_dotenv()
DEFAULT_DATABASE_URL = "sqlite:///./traces.db"

# 創建SQLAlchemy的一個class，然後在其它地方使用
Base = declarative_base()
SessionLocal = sessionmaker(autocommit=False, autoflush=False)
engine = None


def make_engine(url: str, echo: bool = False):
    if url.startswith("sqlite"):
        kwargs = {"connect_args": {"check_same_thread": False}}
        # 記憶體資料庫必須共用同一條連線
        if ":memory:" in url:
            kwargs["poolclass"] = StaticPool
        return create_engine(url, echo=echo, **kwargs)
    return create_engine(url, echo=echo)


# SQL 只在除錯模式輸出
def configure_database(url: str = None, echo: bool = False):
    global engine
    engine = make_engine(url or os.getenv("DATABASE_URL", DEFAULT_DATABASE_URL), echo=echo)
    SessionLocal.configure(bind=engine)
    Base.metadata.create_all(bind=engine)
    return engine


def get_db():
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()
